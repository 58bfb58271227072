//! Adam with decoupled weight decay, and joint global-norm gradient
//! clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Also decay biases and BatchNorm scale/shift.
    pub decay_all: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: Some(1.0), decay_all: false }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings: {self:?}")))
        }
    }
}

/// Moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

fn check_finite<F: Float>(grads: &[&[F]]) -> Result<()> {
    match grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        Some(i) => Err(Error::NonFiniteGradient(i)),
        None => Ok(()),
    }
}

/// Joint L2 norm over all tensors, accumulated in f64.
pub fn global_norm<F: Float>(grads: &[&[F]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale every gradient by `max_norm / norm` when the joint norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut [&mut [F]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidConfig(format!("max_norm must be positive, got {max_norm}")));
    }
    let views: Vec<&[F]> = grads.iter().map(|g| &**g).collect();
    check_finite(&views)?;
    let norm = global_norm(&views);
    if norm > max_norm {
        let scale = F::from(max_norm / norm).unwrap();
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

impl<F: Float> AdamState<F> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&[F]]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected Adam update. Tensors with `decay[i]` set are first
    /// shrunk by `1 − lr·wd`, independently of the adaptive step.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]], decay: &[bool]) -> Result<()> {
        if params.len() != grads.len()
            || params.len() != self.first_moment.len()
            || decay.len() != params.len()
            || params.iter().zip(grads).zip(&self.first_moment).any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
        {
            return Err(Error::ShapeMismatch("parameters, gradients and optimizer state disagree".into()));
        }
        check_finite(grads)?;

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = F::from(c.lr).unwrap();
        let b1 = F::from(c.beta1).unwrap();
        let b2 = F::from(c.beta2).unwrap();
        let eps = F::from(c.eps).unwrap();
        let one = F::one();
        let bias1 = one - b1.powi(t);
        let bias2 = one - b2.powi(t);
        let shrink = one - F::from(c.lr * c.weight_decay).unwrap();

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let decayed = (decay[i] || c.decay_all) && c.weight_decay > 0.0;
            for j in 0..param.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                let mut p = param[j];
                if decayed {
                    p *= shrink;
                }
                param[j] = p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
