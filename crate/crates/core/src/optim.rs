//! Weight initialisation, the stream-kernel L2 penalty and the Adam optimiser.

use indexmap::IndexMap;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::model::{is_learnable, is_stream_kernel, ModelParams};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("optimizer state for {name} has {found} elements, parameter has {expected}")]
    StateShape {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// i.i.d. draws from `U[-L, L]` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_truncated_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = glorot_limit(fan_in, fan_out);
    Tensor::from_fn(shape, |_| {
        T::from_f64_lossy(rng.random_range(-limit..=limit))
    })
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `lambda · Σ ‖W‖²` over the stream convolution kernels registered in `g`,
/// as a differentiable scalar node.
pub fn l2_penalty<T: Scalar>(g: &mut Graph<T>, lambda: f64) -> Result<NodeId, TensorError> {
    let kernels: Vec<NodeId> = g
        .named_params()
        .iter()
        .filter(|(name, _)| is_stream_kernel(name))
        .map(|&(_, id)| id)
        .collect();
    g.sum_squares(&kernels, T::from_f64_lossy(lambda))
}

/// Value of the L2 penalty computed straight from a parameter registry.
pub fn l2_penalty_value<T: Scalar>(params: &ModelParams<T>, lambda: f64) -> f64 {
    lambda
        * params
            .iter()
            .filter(|(name, _)| is_stream_kernel(name))
            .flat_map(|(_, t)| t.data().iter())
            .map(|&v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0009,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: IndexMap<String, Vec<T>>,
    pub second_moment: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }
}

/// One Adam update of every learnable tensor from its gradient slot.
/// Batch-norm running statistics are left alone. Fails without touching
/// anything if a learnable tensor has no gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut AdamState<T>,
) -> Result<(), OptimError> {
    for (name, t) in params.iter() {
        if is_learnable(name) && t.grad().is_none() {
            return Err(OptimError::MissingGrad(name.to_string()));
        }
        for moments in [&state.first_moment, &state.second_moment] {
            if let Some(m) = moments.get(name) {
                if m.len() != t.len() {
                    return Err(OptimError::StateShape {
                        name: name.to_string(),
                        expected: t.len(),
                        found: m.len(),
                    });
                }
            }
        }
    }
    state.step += 1;
    let AdamConfig {
        alpha,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let bc1 = 1.0 - beta1.powf(state.step as f64);
    let bc2 = 1.0 - beta2.powf(state.step as f64);
    for (name, t) in params.iter_mut() {
        if !is_learnable(name) {
            continue;
        }
        let n = t.len();
        let m = state
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = state
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let grad = t.grad().expect("checked above").to_vec();
        for (i, theta) in t.data_mut().iter_mut().enumerate() {
            let g = grad[i].to_f64_lossy();
            let mi = beta1 * m[i].to_f64_lossy() + (1.0 - beta1) * g;
            let vi = beta2 * v[i].to_f64_lossy() + (1.0 - beta2) * g * g;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let update = alpha * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
            *theta = T::from_f64_lossy(theta.to_f64_lossy() - update);
        }
    }
    Ok(())
}
