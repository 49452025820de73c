use crate::error::{Error, Result};
use crate::tensor::Real;

/// Moment estimates and step count, as persisted in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState<T>) {
        self.state = state;
    }

    /// One optimizer step over parallel lists of parameters and gradients.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "adam: {} parameter arrays but {} gradient arrays",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Usage(format!(
                    "adam: parameter {i} has {} values but its gradient has {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.state.v = self.state.m.clone();
        } else if self.state.m.len() != params.len()
            || self.state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Usage("adam: parameter layout changed between steps".into()));
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let corr1 = T::lit(1.0 - self.beta1.powi(t));
        let corr2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales a layer's gradients so their joint ℓ2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_l2<T: Real>(layer_grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm_of = |gs: &[Vec<T>]| {
        gs.iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    };
    let original = norm_of(layer_grads);
    let mut norm = original;
    // Rounding in low precision can leave the scaled norm a hair above the
    // bound; shrink again until it holds.
    let mut shrink = 1.0;
    while norm > max_norm && norm.is_finite() {
        let scale = T::lit(max_norm / norm * shrink);
        for v in layer_grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= scale;
        }
        norm = norm_of(layer_grads);
        shrink = 1.0 - 1e-6;
    }
    original
}
