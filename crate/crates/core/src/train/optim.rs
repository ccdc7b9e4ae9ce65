use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Linear warmup to `peak` over `warmup` steps, then inverse square-root
/// decay: `lr(t) = peak · min(t / W, sqrt(W / t))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl LrSchedule {
    /// Learning rate of 1-based step `t`. Step 0 has rate 0.
    pub fn lr(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let t = t as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (t / w).min((w / t).sqrt())
    }
}

/// Adam with moment buffers for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// `β = (0.9, 0.98)`, `ε = 1e-9`; `sizes` are the element counts of the
    /// parameters in the order they will be passed to [`step`](Self::step).
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![S::zero(); n], vec![S::zero(); n]))
            .unzip();
        AdamState {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter.
    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = (&'a mut [S], &'a [S])>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64_lossy(self.beta1);
        let b2 = S::from_f64_lossy(self.beta2);
        let c1 = S::from_f64_lossy(1.0 - self.beta1);
        let c2 = S::from_f64_lossy(1.0 - self.beta2);
        let bias1 = S::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bias2 = S::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = S::from_f64_lossy(lr);
        let eps = S::from_f64_lossy(self.eps);
        let mut count = 0;
        for (i, (p, g)) in params.into_iter().enumerate() {
            count += 1;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(p.len(), m.len(), "parameter {i} changed size");
            for j in 0..p.len() {
                m[j] = b1 * m[j] + c1 * g[j];
                v[j] = b2 * v[j] + c2 * g[j] * g[j];
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        assert_eq!(count, self.m.len(), "parameter count changed");
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
