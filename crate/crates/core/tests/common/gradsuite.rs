//! Every finite-difference case, shared by the op tests, the model tests and
//! the acceptance report.

use psn_core::optim::l2_penalty;
use psn_core::{ArchitectureSpec, Graph, Mode, Model, NodeId, RunningStats, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, random_tensor, rel_err};

pub struct GradCase {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

const SMOOTH: f64 = 1e-6;
const KINKED: f64 = 1e-4;

/// Scalar probe `Σ_b Σ_j w_j · y_bj` built from graph primitives; `w` is
/// tiled cyclically to the per-sample width.
pub fn weighted_sum(g: &mut Graph<f64>, y: NodeId, w: &Tensor<f64>) -> NodeId {
    let flat = g.flatten(y).unwrap();
    let cols = g.value(flat).shape()[1];
    let wt = g.input(Tensor::from_fn(&[1, cols], |i| w.data()[i % w.len()]));
    let zero = g.input(Tensor::zeros(&[1]));
    let proj = g.dense(flat, wt, zero).unwrap();
    g.sum(proj).unwrap()
}

/// One case per op (and per mode where the op has two).
pub fn op_cases() -> Vec<GradCase> {
    let mut out = Vec::new();

    for stride in [1, 2] {
        let inputs = [
            random_tensor(&[2, 2, 5, 4], 31),
            random_tensor(&[3, 2, 3, 3], 32),
            random_tensor(&[3], 33),
        ];
        let w = random_tensor(&[97], 34);
        let err = gradcheck(&inputs, 1e-5, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], stride, 1).unwrap();
            weighted_sum(g, y, &w)
        });
        out.push(GradCase::new(
            format!("conv2d stride {stride}"),
            err,
            SMOOTH,
        ));
    }

    // continuous random inputs have no pooling ties
    let w = random_tensor(&[2, 2, 3, 3], 42);
    let err = gradcheck(&[random_tensor(&[2, 2, 5, 5], 41)], 1e-6, |g, ids| {
        let y = g.maxpool2d(ids[0], true).unwrap();
        weighted_sum(g, y, &w)
    });
    out.push(GradCase::new("maxpool2d", err, KINKED));

    let mut x = random_tensor(&[3, 7], 51);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    let w = random_tensor(&[3, 7], 52);
    let err = gradcheck(&[x], 1e-6, |g, ids| {
        let y = g.relu(ids[0]).unwrap();
        weighted_sum(g, y, &w)
    });
    out.push(GradCase::new("relu", err, KINKED));

    for training in [true, false] {
        let inputs = [
            random_tensor(&[3, 2, 3, 3], 61),
            random_tensor(&[2], 62),
            random_tensor(&[2], 63),
        ];
        let w = random_tensor(&[3, 2, 3, 3], 64);
        let err = gradcheck(&inputs, 1e-5, |g, ids| {
            let mut mean = vec![0.1, -0.2];
            let mut var = vec![0.5, 2.0];
            let stats = RunningStats {
                mean: &mut mean,
                var: &mut var,
                momentum: 0.99,
                epsilon: 1e-5,
            };
            let y = g
                .batch_norm(ids[0], ids[1], ids[2], stats, training)
                .unwrap();
            weighted_sum(g, y, &w)
        });
        let mode = if training { "training" } else { "inference" };
        out.push(GradCase::new(format!("batch_norm {mode}"), err, SMOOTH));
    }

    // the mask is redrawn from the same seed on every evaluation
    let w = random_tensor(&[3, 8], 91);
    let err = gradcheck(&[random_tensor(&[3, 8], 92)], 1e-5, |g, ids| {
        let y = g
            .dropout(ids[0], 0.5, true, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        weighted_sum(g, y, &w)
    });
    out.push(GradCase::new("dropout", err, SMOOTH));

    let inputs = [
        random_tensor(&[4, 6], 71),
        random_tensor(&[5, 6], 72),
        random_tensor(&[5], 73),
    ];
    let w = random_tensor(&[4, 5], 74);
    let err = gradcheck(&inputs, 1e-5, |g, ids| {
        let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
        weighted_sum(g, y, &w)
    });
    out.push(GradCase::new("dense", err, SMOOTH));

    let labels = Tensor::new(&[4, 2], vec![1., 0., 0., 1., 0., 1., 1., 0.]).unwrap();
    let err = gradcheck(&[random_tensor(&[4, 2], 75)], 1e-5, |g, ids| {
        let p = g.softmax(ids[0]).unwrap();
        g.cross_entropy(p, &labels).unwrap()
    });
    out.push(GradCase::new(
        "softmax + cross_entropy (fused)",
        err,
        SMOOTH,
    ));

    let w = random_tensor(&[4, 3], 76);
    let err = gradcheck(&[random_tensor(&[4, 3], 77)], 1e-5, |g, ids| {
        let p = g.softmax(ids[0]).unwrap();
        weighted_sum(g, p, &w)
    });
    out.push(GradCase::new("softmax", err, SMOOTH));

    let mut probs = random_tensor(&[4, 2], 78);
    probs
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = v.abs() * 0.5 + 0.2);
    let err = gradcheck(&[probs], 1e-6, |g, ids| {
        g.cross_entropy(ids[0], &labels).unwrap()
    });
    out.push(GradCase::new("cross_entropy", err, SMOOTH));

    let inputs = [
        random_tensor(&[2, 2, 2, 3], 81),
        random_tensor(&[2, 1, 2, 3], 82),
    ];
    let w = random_tensor(&[2, 9, 2], 83);
    let err = gradcheck(&inputs, 1e-5, |g, ids| {
        let c = g.concat_channels(ids[0], ids[1]).unwrap();
        let a = weighted_sum(g, c, &w);
        let r = g.sum_squares(&[ids[0], ids[1]], 0.37).unwrap();
        g.add(a, r).unwrap()
    });
    out.push(GradCase::new(
        "concat + flatten + sum_squares + add",
        err,
        SMOOTH,
    ));

    out
}

/// Depth-reduced network at patch 16.
pub fn reduced_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        patch_size: 16,
        stream_channels: vec![2, 3, 3],
        stream_pool_after: vec![0, 2],
        fusion_channels: vec![4, 3],
        fc1_width: 6,
        num_classes: 2,
    }
}

/// Cross-entropy plus L2 of a training-mode pass with a fixed dropout mask;
/// with `with_grads`, also the gradient of every parameter.
pub fn network_loss(
    model: &Model<f64>,
    sar: &Tensor<f64>,
    opt: &Tensor<f64>,
    labels: &Tensor<f64>,
    with_grads: bool,
) -> (f64, Option<Model<f64>>) {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut pass = m
        .forward(
            sar,
            opt,
            Mode::Train {
                dropout_rate: 0.3,
                rng: &mut rng,
                step: 1,
            },
        )
        .unwrap();
    let g = &mut pass.graph;
    let ce = g.cross_entropy(pass.probs, labels).unwrap();
    let l2 = l2_penalty(g, 0.01).unwrap();
    let loss = g.add(ce, l2).unwrap();
    let value = g.value(loss).data()[0];
    if !with_grads {
        return (value, None);
    }
    g.backward(loss).unwrap();
    let mut grads = model.clone();
    grads.params.zero_grads();
    grads.params.accumulate_grads(g).unwrap();
    (value, Some(grads))
}

/// Every learnable parameter of the reduced network on a 2-pair batch.
/// Returns the case and the number of checked entries.
pub fn full_network_case() -> (GradCase, usize) {
    let model = Model::<f64>::build(reduced_spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sar = random_tensor(&[2, 1, 16, 16], 10);
    let opt = random_tensor(&[2, 1, 16, 16], 11);
    let labels = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let grads = network_loss(&model, &sar, &opt, &labels, true).1.unwrap();
    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names.iter().filter(|n| psn_core::model::is_learnable(n)) {
        let analytic = grads.params.get(name).unwrap().grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[i] += step;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[i] -= step;
            let numeric = (network_loss(&plus, &sar, &opt, &labels, false).0
                - network_loss(&minus, &sar, &opt, &labels, false).0)
                / (2.0 * step);
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    (
        GradCase::new("full network (patch 16, reduced depth)", worst, KINKED),
        checked,
    )
}
