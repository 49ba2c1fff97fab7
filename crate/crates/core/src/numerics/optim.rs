//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn for_params(params: &[Tensor<S>]) -> Self {
        OptimState {
            m: params.iter().map(|p| vec![S::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![S::ZERO; p.len()]).collect(),
            t: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter. `decay[i]` selects whether parameter
    /// `i` receives weight decay; a `None` gradient counts as zero.
    pub fn step<S: Scalar>(
        &self,
        params: &mut [Tensor<S>],
        decay: &[bool],
        grads: &[Option<Vec<S>>],
        state: &mut OptimState<S>,
        lr: f64,
    ) {
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ib1, ib2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        let (sbc1, sbc2) = (S::from_f64(bc1), S::from_f64(bc2));
        let (slr, eps) = (S::from_f64(lr), S::from_f64(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { S::from_f64(self.weight_decay) } else { S::ZERO };
            let g = grads[i].as_deref();
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(S::ZERO, |g| g[j]);
                m[j] = b1 * m[j] + ib1 * gj;
                v[j] = b2 * v[j] + ib2 * gj * gj;
                let mhat = m[j] / sbc1;
                let vhat = v[j] / sbc2;
                *pv = *pv - slr * (mhat / (vhat.sqrt() + eps)) - slr * wd * *pv;
            }
        }
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Vec<S>>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>(),
    );
    if norm > max_norm && norm > 0.0 {
        let s = S::from_f64(max_norm / norm);
        for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    norm
}
