//! Decoupled-weight-decay Adam over a [`ParamSet`].

use crate::model::params::{ParamKind, ParamSet};
use crate::tensor::Tensor4D;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment buffers, one per optimized parameter (buffers are
/// skipped). Decay applies to `Weight` entries only — never to biases or
/// normalization scale/shift, and never through gradients to running stats.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Tensor4D>,
    v: Vec<Tensor4D>,
    /// Update count for bias correction.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor4D> = (0..params.len())
            .map(|i| {
                let (n, c, h, w) = params.value(i).shape();
                Tensor4D::zeros(n, c, h, w)
            })
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. `grad_of` returns the gradient for a parameter index, or
    /// `None` when no gradient flowed (that parameter is left untouched).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grad_of: impl Fn(usize) -> Option<Tensor4D>,
        lr: f32,
        weight_decay: f32,
    ) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for idx in 0..params.len() {
            let kind = params.kind(idx);
            if kind == ParamKind::Buffer {
                continue;
            }
            let Some(grad) = grad_of(idx) else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let theta = params.value_mut(idx).data_mut();
            let decay = if kind == ParamKind::Weight { weight_decay } else { 0.0 };
            for ((t, g), (mi, vi)) in theta
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *t -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * *t);
            }
        }
    }

    /// Moment tensors for checkpointing, in parameter order.
    pub fn moments(&self) -> (&[Tensor4D], &[Tensor4D]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut [Tensor4D], &mut [Tensor4D]) {
        (&mut self.m, &mut self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;

    fn tiny_params() -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        ps.insert("w", ParamKind::Weight, Tensor4D::full(1, 1, 1, 2, 1.0))?;
        ps.insert("b", ParamKind::Gain, Tensor4D::full(1, 1, 1, 2, 1.0))?;
        ps.insert("rm", ParamKind::Buffer, Tensor4D::full(1, 1, 1, 2, 1.0))?;
        Ok(ps)
    }

    #[test]
    fn first_step_moves_by_lr_and_decays_weights_only() {
        let mut ps = tiny_params().unwrap();
        let mut opt = AdamW::new(&ps);
        let g = Tensor4D::full(1, 1, 1, 2, 0.5);
        opt.step(&mut ps, |i| (i < 2).then(|| g.clone()), 0.01, 0.1);
        // First Adam step moves ~lr in the gradient direction.
        let w = ps.get("w").unwrap().data()[0];
        let b = ps.get("b").unwrap().data()[0];
        let expect_step = 0.01 * (0.5 / (0.5f32 + ADAM_EPS));
        assert!((b - (1.0 - expect_step)).abs() < 1e-5, "b = {b}");
        assert!((w - (1.0 - expect_step - 0.01 * 0.1)).abs() < 1e-5, "w = {w}");
        // Buffers never move.
        assert_eq!(ps.get("rm").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut ps = tiny_params().unwrap();
        let mut opt = AdamW::new(&ps);
        opt.step(&mut ps, |_| None, 0.01, 0.1);
        assert_eq!(ps.get("w").unwrap().data(), &[1.0, 1.0]);
    }
}
