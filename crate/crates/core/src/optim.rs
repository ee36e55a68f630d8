//! SGD with momentum and a cosine learning-rate schedule.

use crate::encoder::{EncoderParams, ParamGrads, Scalar};
use crate::error::{Error, Result};

/// Velocity buffers plus the schedule hyperparameters. Hyperparameters are
/// held at checkpoint precision (32-bit) so a saved state reloads exactly.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Vec<T>>,
    pub momentum: f32,
    pub base_lr: f32,
    pub lr_min: f32,
    /// Schedule length in epochs.
    pub horizon: usize,
}

impl<T: Scalar> PartialEq for OptimizerState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.momentum.to_bits() == other.momentum.to_bits()
            && self.base_lr.to_bits() == other.base_lr.to_bits()
            && self.lr_min.to_bits() == other.lr_min.to_bits()
            && self.horizon == other.horizon
            && self.velocity.len() == other.velocity.len()
            && self.velocity.iter().zip(&other.velocity).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &EncoderParams<T>, momentum: f64, base_lr: f64, lr_min: f64, horizon: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) || !(lr_min >= 0.0 && lr_min <= base_lr) {
            return Err(Error::InvalidConfig(format!("need 0 <= lr_min ({lr_min}) <= base_lr ({base_lr}), base_lr > 0")));
        }
        if horizon == 0 {
            return Err(Error::InvalidConfig("schedule horizon must be positive".into()));
        }
        Ok(Self {
            velocity: params.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
            momentum: momentum as f32,
            base_lr: base_lr as f32,
            lr_min: lr_min as f32,
            horizon,
        })
    }
}

/// `lr_min + (base_lr - lr_min) * (1 + cos(pi * epoch / horizon)) / 2`.
pub fn cosine_lr<T>(epoch: usize, state: &OptimizerState<T>) -> Result<f64> {
    if epoch > state.horizon {
        return Err(Error::EpochOutOfRange { epoch, horizon: state.horizon });
    }
    let (base, min) = (f64::from(state.base_lr), f64::from(state.lr_min));
    let phase = std::f64::consts::PI * epoch as f64 / state.horizon as f64;
    Ok(min + (base - min) * 0.5 * (1.0 + phase.cos()))
}

/// `v <- momentum * v + g; w <- w - lr * v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let matches = |v: &[Vec<T>]| v.len() == sizes.len() && v.iter().zip(&sizes).all(|(t, &n)| t.len() == n);
    if !matches(&grads.tensors) || !matches(&state.velocity) {
        return Err(Error::ShapeMismatch("gradient or velocity layout differs from parameters".into()));
    }
    let mu = T::of(f64::from(state.momentum));
    let lr = T::of(lr);
    for ((tensor, g), v) in params.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut state.velocity) {
        for ((w, &gi), vi) in tensor.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi;
            *w = *w - lr * *vi;
        }
    }
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> EncoderParams<f64> {
        let cfg = EncoderConfig {
            input_size: 8,
            conv_channels: vec![2],
            hidden_dim: 3,
            embed_dim: 2,
            ..EncoderConfig::default()
        };
        EncoderParams::init(cfg, 0).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let p = tiny();
        let s = OptimizerState::new(&p, 0.9, 1e-3, 0.0, 100).unwrap();
        assert_eq!(cosine_lr(0, &s).unwrap(), f64::from(1e-3f32));
        assert!((cosine_lr(50, &s).unwrap() - 5e-4).abs() < 1e-10);
        assert!(cosine_lr(99, &s).unwrap() < 1e-6);
        assert!(cosine_lr(100, &s).unwrap().abs() < 1e-18);
        assert!(matches!(cosine_lr(101, &s), Err(Error::EpochOutOfRange { epoch: 101, horizon: 100 })));
    }

    #[test]
    fn zero_gradient_zero_velocity_is_a_no_op() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = OptimizerState::new(&p, 0.9, 0.1, 0.0, 10).unwrap();
        let g = ParamGrads::zeros_like(&p);
        sgd_momentum_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert!(p.version() > before.version());
    }

    #[test]
    fn first_step_from_rest() {
        for momentum in [0.0, 0.9] {
            let mut p = tiny();
            let w0 = p.tensors()[1].data[0];
            let mut s = OptimizerState::new(&p, momentum, 0.1, 0.0, 10).unwrap();
            let mut g = ParamGrads::zeros_like(&p);
            g.tensors[1][0] = 1.0;
            sgd_momentum_step(&mut p, &g, &mut s, 0.1).unwrap();
            assert_eq!(s.velocity[1][0], 1.0);
            assert!((w0 - p.tensors()[1].data[0] - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = tiny();
        let mut s = OptimizerState::new(&p, 0.9, 0.1, 0.0, 10).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.tensors.pop();
        assert!(matches!(sgd_momentum_step(&mut p, &g, &mut s, 0.1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = tiny();
        let w0 = p.tensors()[0].data[0];
        let mut s = OptimizerState::new(&p, 0.5, 0.1, 0.0, 10).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.tensors[0][0] = 1.0;
        sgd_momentum_step(&mut p, &g, &mut s, 0.1).unwrap();
        sgd_momentum_step(&mut p, &g, &mut s, 0.1).unwrap();
        // v1 = 1, v2 = 1.5; total step 0.1 * 2.5.
        assert!((p.tensors()[0].data[0] - (w0 - 0.25)).abs() < 1e-12);
        assert_eq!(s.velocity[0][0], 1.5);
    }
}
