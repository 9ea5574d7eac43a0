//! Adam with decoupled weight decay and global-norm clipping over the
//! joint auxiliary + main parameter set.
//!
//! The optimizer works on flat slices in a fixed traversal order (the order
//! `PairWeights::for_each_param` visits), which is also the order moments
//! are checkpointed in. Norms and moment math accumulate in f64 regardless
//! of the parameter scalar type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPS: f64 = 1e-6;
pub const WEIGHT_DECAY: f64 = 0.01;

/// Moments are stored in the parameter scalar type so a checkpoint holds
/// them losslessly and a resumed run replays updates bit-for-bit.
pub struct OptimizerState<S: Scalar> {
    /// First and second moments, one pair of buffers per parameter tensor.
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// Completed update count.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            weight_decay: WEIGHT_DECAY,
        }
    }

    /// Advances the step counter and captures everything a per-buffer
    /// update needs as plain scalars.
    pub fn begin_step(&mut self, lr: f64) -> AdamScalars {
        self.t += 1;
        let t = self.t as i32;
        AdamScalars {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            m_corr: 1.0 - self.beta1.powi(t),
            v_corr: 1.0 - self.beta2.powi(t),
            lr,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamScalars {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m_corr: f64,
    pub v_corr: f64,
    pub lr: f64,
}

/// AdamW on one parameter buffer. Moment math runs in f64 but moments are
/// rounded to S before use, so an update computed from checkpointed
/// moments is identical to one computed in a continuous run.
pub fn adam_update_buffer<S: Scalar>(
    p: &mut [S],
    g: &[S],
    m: &mut [S],
    v: &mut [S],
    k: AdamScalars,
) {
    debug_assert!(p.len() == g.len() && p.len() == m.len() && p.len() == v.len());
    for i in 0..p.len() {
        let gi = g[i].as_f64();
        m[i] = S::of_f64(k.beta1 * m[i].as_f64() + (1.0 - k.beta1) * gi);
        v[i] = S::of_f64(k.beta2 * v[i].as_f64() + (1.0 - k.beta2) * gi * gi);
        let m_hat = m[i].as_f64() / k.m_corr;
        let v_hat = v[i].as_f64() / k.v_corr;
        let x = p[i].as_f64();
        let decayed = x - k.lr * k.weight_decay * x;
        p[i] = S::of_f64(decayed - k.lr * m_hat / (v_hat.sqrt() + k.eps));
    }
}

/// Global L2 norm across every gradient buffer. Non-finite entries are a
/// hard error carrying the offending buffer index.
pub fn global_norm<S: Scalar>(grads: &[Vec<S>]) -> Result<f64> {
    let mut sum = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for &x in g {
            let x = x.as_f64();
            if !x.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient in parameter buffer {i}"
                )));
            }
            sum += x * x;
        }
    }
    Ok(sum.sqrt())
}

/// Scales all gradients by clip_norm/norm when the joint norm exceeds the
/// threshold. Returns the pre-clip norm and whether scaling happened.
pub fn clip_gradients<S: Scalar>(grads: &mut [Vec<S>], clip_norm: f64) -> Result<(f64, bool)> {
    let norm = global_norm(grads)?;
    if norm <= clip_norm || norm == 0.0 {
        return Ok((norm, false));
    }
    let scale = S::of_f64(clip_norm / norm);
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x = *x * scale;
        }
    }
    Ok((norm, true))
}

/// One AdamW step over parameters given as mutable flat slices aligned
/// with `grads` and the optimizer moments.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut [S]],
    grads: &[Vec<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config(format!(
            "optimizer buffer mismatch: {} params, {} grads, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let k = state.begin_step(lr);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() {
            return Err(Error::config("parameter/gradient length mismatch"));
        }
        adam_update_buffer(p, g, m, v, k);
    }
    Ok(())
}
