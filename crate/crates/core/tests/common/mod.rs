#![allow(dead_code)]

pub mod gradsuite;

use psn_core::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error; below 1e-3 in magnitude it degrades to absolute error so
/// that near-zero gradients are not dominated by finite-difference roundoff.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences of a scalar-valued graph builder against its
/// analytic backward pass. `build` receives the variable node ids in the
/// order of `inputs` and returns the scalar loss node. Returns the maximum
/// relative error over all input elements.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let analytic = g.grad(id).unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Straight-line Adam: the textbook update written out for one scalar,
/// sharing nothing with the library beyond the hyperparameter values.
pub fn adam_reference(theta0: f64, grads: &[f64], alpha: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= alpha * m_hat / (v_hat.sqrt() + eps);
    }
    theta
}

/// Runs `trajectories` random single-parameter Adam trajectories through the
/// library and the reference; returns the worst relative disagreement.
pub fn adam_oracle_worst(trajectories: usize, seed: u64) -> f64 {
    use psn_core::model::ModelParams;
    use psn_core::optim::{adam_step, AdamConfig, AdamState};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trajectories {
        let config = AdamConfig {
            alpha: 10f64.powf(rng.random_range(-5.0..-1.0)),
            beta1: rng.random_range(0.5..0.99),
            beta2: rng.random_range(0.9..0.9999),
            epsilon: 1e-8,
        };
        let theta0: f64 = rng.random_range(-3.0..3.0);
        let steps = rng.random_range(1..=60);
        let scale = 10f64.powf(rng.random_range(-3.0..2.0));
        let grads: Vec<f64> = (0..steps)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();

        let mut params = ModelParams::<f64>::new();
        params.insert("w", Tensor::scalar(theta0));
        let mut state = AdamState::new(config);
        for &g in &grads {
            params.get_mut("w").unwrap().set_grad(Some(vec![g]));
            adam_step(&mut params, &mut state).unwrap();
        }
        let got = params.get("w").unwrap().data()[0];
        let want = adam_reference(
            theta0,
            &grads,
            config.alpha,
            config.beta1,
            config.beta2,
            config.epsilon,
        );
        worst = worst.max((got - want).abs() / want.abs().max(1e-12));
    }
    worst
}
