use super::kernels::{self, ConvGeom};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var, width: usize },
    Affine { x: Var, scale: T },
    Unary { x: Var, op: UnaryOp },
    Conv2d { x: Var, w: Var, bias: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: usize,
        plane: usize,
        train: bool,
    },
    Concat { a: Var, b: Var, rows: usize, wa: usize, wb: usize },
    TimeStep { x: Var, t: usize, dims: [usize; 4] },
    StackTime { inputs: Vec<Var>, batch: usize, width: usize },
    Sum { x: Var },
    Mean { x: Var },
    Bce { pred: Var, target: Vec<T>, weight: Vec<T>, norm: T, clamp: T },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::MaxPool { x, .. }
            | Op::TimeStep { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Conv2d { x, w, bias, .. } => vec![*x, *w, *bias],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::StackTime { inputs, .. } => inputs.clone(),
            Op::Bce { pred, .. } => vec![*pred],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Affine { .. } => "affine",
            Op::Unary { .. } => "unary",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat",
            Op::TimeStep { .. } => "time_step",
            Op::StackTime { .. } => "stack_time",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel that went into the statistics.
    pub count: usize,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and a reverse sweep is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.value.requires_grad() {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Input handles of a recorded node (empty for leaves).
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs = op.inputs();
            let finite_inputs = inputs
                .iter()
                .all(|i| self.nodes[i.0].value.data().iter().all(|v| v.is_finite()));
            let exempt = matches!(op, Op::Unary { op: UnaryOp::Exp, .. });
            if finite_inputs && !exempt {
                debug_assert!(
                    value.data().iter().all(|v| v.is_finite()),
                    "{} produced a non-finite value from finite inputs",
                    op.name()
                );
            }
        }
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].value.requires_grad());
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; gradients are tracked if the tensor asks for them.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.zero_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor` as a gradient-tracked leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.clone().with_requires_grad(true);
        t.zero_grad();
        self.leaf(t)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_requires_grad(false)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), false, T::zero(), &mut out);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [width] {
            return Err(TensorError::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data: Vec<T> = self
            .data(x)
            .chunks(width)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias, width }))
    }

    /// `scale · x + shift`, element-wise, with scalar constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::Affine { x, scale }))
    }

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let src = self.data(x);
        if op == UnaryOp::Log {
            if let Some(bad) = src.iter().find(|&&v| v <= T::zero() || v.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    msg: format!("input {bad} is not positive"),
                });
            }
        }
        let data = src
            .iter()
            .map(|&v| match op {
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Log => v.ln(),
                UnaryOp::Exp => v.exp(),
            })
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::Unary { x, op }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Relu)
    }

    /// Same-padded, stride-1 cross-correlation.
    ///
    /// `x: [B × Cin × H × W]`, `w: [Cout × Cin × k × k]` with odd `k`,
    /// `bias: [Cout]`; output `[B × Cout × H × W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(TensorError::shape("conv2d", sx, sw));
        }
        if self.shape(bias) != [sw[0]] {
            return Err(TensorError::shape("conv2d", sw, self.shape(bias)));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(bias));
        let shape = [geom.batch, geom.c_out, geom.height, geom.width];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, bias, geom }))
    }

    /// Max-pool over the last two axes with window = stride = `(kt, kf)`.
    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (kt, kf) = kernel;
        if s.len() != 4 {
            return Err(TensorError::invalid("maxpool2d", format!("expected rank 4, got {s:?}")));
        }
        if kt == 0 || kf == 0 || !s[2].is_multiple_of(kt) || !s[3].is_multiple_of(kf) {
            return Err(TensorError::invalid(
                "maxpool2d",
                format!(
                    "input {s:?} must have T divisible by {kt} and F divisible by {kf}"
                ),
            ));
        }
        let (out, argmax) =
            kernels::maxpool_forward(self.data(x), s[0] * s[1], s[2], s[3], kt, kf);
        let shape = [s[0], s[1], s[2] / kt, s[3] / kf];
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(TensorError::invalid("batch_norm", format!("expected rank ≥ 2, got {s:?}")));
        }
        let channels = s[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(TensorError::shape("batch_norm", s, self.shape(gamma)));
        }
        Ok((s[0], channels, s[2..].iter().product()))
    }

    fn bn_record(
        &mut self,
        (x, gamma, beta): (Var, Var, Var),
        (batch, channels, plane): (usize, usize, usize),
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for n in 0..batch {
            for c in 0..channels {
                let off = (n * channels + c) * plane;
                for i in off..off + plane {
                    let h = (src[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                plane,
                train,
            },
        ))
    }

    /// Batch normalization over every axis except 1, using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let dims = self.bn_dims(x, gamma, beta)?;
        let (batch, channels, plane) = dims;
        let (mean, var) = kernels::channel_moments(self.data(x), batch, channels, plane);
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let inv_std = var.iter().map(|&v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let out = self.bn_record((x, gamma, beta), dims, &mean_t, inv_std, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                count: batch * plane,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(TensorError::shape("batch_norm", self.shape(x), &[mean.len()]));
        }
        let inv_std = var
            .iter()
            .map(|&v| T::lit(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        self.bn_record((x, gamma, beta), dims, mean, inv_std, false)
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::shape("concat", sa, sb));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).len() / wa;
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank ≥ 1") = wa + wb;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b, rows, wa, wb }))
    }

    /// Slices time step `t` out of `[B × C × T × F]` as a `[B × C·F]` row batch.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || t >= s[2] {
            return Err(TensorError::invalid(
                "time_step",
                format!("step {t} out of range for {s:?}"),
            ));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let [b, c, steps, f] = dims;
        let src = self.data(x);
        let mut out = Vec::with_capacity(b * c * f);
        for bi in 0..b {
            for ci in 0..c {
                let off = ((bi * c + ci) * steps + t) * f;
                out.extend_from_slice(&src[off..off + f]);
            }
        }
        Ok(self.push(Tensor::new([b, c * f], out)?, Op::TimeStep { x, t, dims }))
    }

    /// Stacks `T` tensors of shape `[B × D]` into `[B × T × D]`.
    pub fn stack_time(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("stack_time", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(TensorError::invalid("stack_time", format!("expected rank 2, got {s0:?}")));
        }
        for &v in inputs {
            if self.shape(v) != s0.as_slice() {
                return Err(TensorError::shape("stack_time", &s0, self.shape(v)));
            }
        }
        let (batch, width, steps) = (s0[0], s0[1], inputs.len());
        let mut out = vec![T::zero(); batch * steps * width];
        for (t, &v) in inputs.iter().enumerate() {
            for (b, row) in self.data(v).chunks(width).enumerate() {
                let off = (b * steps + t) * width;
                out[off..off + width].copy_from_slice(row);
            }
        }
        let value = Tensor::new([batch, steps, width], out)?;
        Ok(self.push(
            value,
            Op::StackTime {
                inputs: inputs.to_vec(),
                batch,
                width,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).len() as f64);
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mean { x }))
    }

    /// Weighted binary cross-entropy, `-norm · Σ w·[y ln p + (1-y) ln(1-p)]`,
    /// with `p` clamped to `[clamp, 1 - clamp]` before the logs.
    pub fn bce(&mut self, pred: Var, target: &[T], weight: &[T], norm: T, clamp: T) -> Result<Var> {
        let p = self.data(pred);
        if target.len() != p.len() || weight.len() != p.len() {
            return Err(TensorError::shape("bce", self.shape(pred), &[target.len()]));
        }
        let lo = clamp;
        let hi = T::one() - clamp;
        let mut total = T::zero();
        for ((&pv, &y), &w) in p.iter().zip(target).zip(weight) {
            if w == T::zero() {
                continue;
            }
            // NaN must survive the clamp so divergence stays visible.
            let pc = if pv.is_nan() { pv } else { pv.max(lo).min(hi) };
            total += w * (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        let value = Tensor::scalar(-norm * total);
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
                norm,
                clamp,
            },
        ))
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Usage(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].value.requires_grad() {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g)?;
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = slot(grads, nodes, a) {
                    T::gemm(m, n, k, g, false, nodes[b.0].value.data(), true, T::one(), da);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    T::gemm(k, m, n, nodes[a.0].value.data(), true, g, false, T::one(), db);
                }
            }
            &Op::Add { a, b } => {
                for (v, sign) in [(a, T::one()), (b, T::one())] {
                    if let Some(d) = slot(grads, nodes, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (v, sign) in [(a, T::one()), (b, -T::one())] {
                    if let Some(d) = slot(grads, nodes, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    let od = nodes[other.0].value.data();
                    if let Some(d) = slot(grads, nodes, v) {
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(od) {
                            *d += g * o;
                        }
                    }
                }
            }
            &Op::AddBias { x, bias, width } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = slot(grads, nodes, bias) {
                    for row in g.chunks(width) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += scale * g);
                }
            }
            &Op::Unary { x, op } => {
                let xd = nodes[x.0].value.data();
                let yd = node.value.data();
                if let Some(dx) = slot(grads, nodes, x) {
                    for i in 0..dx.len() {
                        let local = match op {
                            UnaryOp::Sigmoid => yd[i] * (T::one() - yd[i]),
                            UnaryOp::Tanh => T::one() - yd[i] * yd[i],
                            UnaryOp::Relu => {
                                if xd[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Log => T::one() / xd[i],
                            UnaryOp::Exp => yd[i],
                        };
                        dx[i] += g[i] * local;
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let need_dx = nodes[x.0].value.requires_grad();
                let need_w = nodes[w.0].value.requires_grad() || nodes[bias.0].value.requires_grad();
                if !need_dx && !need_w {
                    return;
                }
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    need_dx,
                );
                if let (Some(src), Some(d)) = (dx, slot(grads, nodes, *x)) {
                    d.iter_mut().zip(&src).for_each(|(d, &s)| *d += s);
                }
                if let Some(d) = slot(grads, nodes, *w) {
                    d.iter_mut().zip(&dw).for_each(|(d, &s)| *d += s);
                }
                if let Some(d) = slot(grads, nodes, *bias) {
                    d.iter_mut().zip(&db).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i] += gv;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                plane,
                train,
            } => {
                let channels = inv_std.len();
                let gam = nodes[gamma.0].value.data();
                let n = T::lit((batch * plane) as f64);
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for b in 0..*batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        for i in off..off + plane {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(dx) = slot(grads, nodes, *x) {
                    for b in 0..*batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * plane;
                            let k = gam[c] * inv_std[c];
                            for i in off..off + plane {
                                dx[i] += if *train {
                                    k * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
                if let Some(dg) = slot(grads, nodes, *gamma) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                }
                if let Some(db) = slot(grads, nodes, *beta) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                }
            }
            &Op::Concat { a, b, rows, wa, wb } => {
                let w = wa + wb;
                if let Some(da) = slot(grads, nodes, a) {
                    for r in 0..rows {
                        for j in 0..wa {
                            da[r * wa + j] += g[r * w + j];
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for r in 0..rows {
                        for j in 0..wb {
                            db[r * wb + j] += g[r * w + wa + j];
                        }
                    }
                }
            }
            &Op::TimeStep { x, t, dims } => {
                let [b, c, steps, f] = dims;
                if let Some(dx) = slot(grads, nodes, x) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = ((bi * c + ci) * steps + t) * f;
                            let src = (bi * c + ci) * f;
                            for j in 0..f {
                                dx[off + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::StackTime {
                inputs,
                batch,
                width,
            } => {
                let steps = inputs.len();
                for (t, &v) in inputs.iter().enumerate() {
                    if let Some(d) = slot(grads, nodes, v) {
                        for b in 0..*batch {
                            let off = (b * steps + t) * width;
                            for j in 0..*width {
                                d[b * width + j] += g[off + j];
                            }
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    let s = g[0] / T::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Bce {
                pred,
                target,
                weight,
                norm,
                clamp,
            } => {
                let p = nodes[pred.0].value.data();
                let hi = T::one() - *clamp;
                if let Some(dp) = slot(grads, nodes, *pred) {
                    let scale = -*norm * g[0];
                    for i in 0..dp.len() {
                        let (pv, y, w) = (p[i], target[i], weight[i]);
                        // Clamped predictions have zero local derivative.
                        if w == T::zero() || pv < *clamp || pv > hi {
                            continue;
                        }
                        dp[i] += scale * w * (y / pv - (T::one() - y) / (T::one() - pv));
                    }
                }
            }
        }
    }
}
