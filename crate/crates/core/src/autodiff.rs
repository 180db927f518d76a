//! Recorded computation graph with reverse-mode gradient propagation.
//!
//! Every op appends one node holding its output tensor plus whatever forward
//! context its backward rule needs. Nodes are only ever appended, so the
//! insertion order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.

use rand::Rng;

use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Lower clamp applied to probabilities inside the log of the loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Running statistics and hyperparameters of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: T::from_f64_lossy(Self::DEFAULT_MOMENTUM),
            epsilon: T::from_f64_lossy(Self::DEFAULT_EPSILON),
        }
    }
}

/// Mutable view of a batch-norm layer's running statistics.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Dropout {
        input: NodeId,
        mask: Option<Vec<T>>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Vec<T>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    SumSquares {
        inputs: Vec<NodeId>,
        scale: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    named: Vec<(String, NodeId)>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        debug_assert!(value.is_finite() || matches!(op, Op::Leaf { .. }));
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>, TensorError> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    /// Constant input: no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            t,
        )
    }

    /// Learnable leaf whose gradient accumulates across `backward` calls.
    pub fn variable(&mut self, mut t: Tensor<T>) -> NodeId {
        t.zero_grad();
        self.push(
            Op::Leaf {
                requires_grad: true,
            },
            t,
        )
    }

    /// A [`Graph::variable`] registered under `name`, see [`Graph::named_params`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> NodeId {
        let id = self.variable(t);
        self.named.push((name.into(), id));
        id
    }

    pub fn named_params(&self) -> &[(String, NodeId)] {
        &self.named
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn dims4(
        &self,
        op: &'static str,
        id: NodeId,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        let v = &self.node(id)?.value;
        v.dims4()
            .ok_or_else(|| mismatch(op, format!("expected a 4-D tensor, got {:?}", v.shape())))
    }

    /// 3×3 cross-correlation plus per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (b, cin, h, w) = self.dims4("conv2d", input)?;
        let ks = self.node(kernel)?.value.shape().to_vec();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(mismatch(
                "conv2d",
                format!("kernel must be [Cout,Cin,3,3], got {ks:?}"),
            ));
        }
        if ks[1] != cin {
            return Err(mismatch(
                "conv2d",
                format!("input has {cin} channels, kernel expects {}", ks[1]),
            ));
        }
        if self.node(bias)?.value.shape() != [ks[0]] {
            return Err(mismatch("conv2d", format!("bias must be [{}]", ks[0])));
        }
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be positive".into()));
        }
        for extent in [h, w] {
            let out = ConvGeometry::output_extent(extent, 3, stride, padding);
            if out < 1 {
                return Err(TensorError::EmptyOutput {
                    op: "conv2d",
                    extent: out,
                });
            }
        }
        let geometry = ConvGeometry {
            in_channels: cin,
            out_channels: ks[0],
            height: h,
            width: w,
            kernel: 3,
            stride,
            padding,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            b,
            &geometry,
        );
        let shape = [b, ks[0], geometry.out_height(), geometry.out_width()];
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            out,
        ))
    }

    /// 2×2 stride-2 max pooling; `ceil_mode` keeps partial border windows.
    pub fn maxpool2d(&mut self, input: NodeId, ceil_mode: bool) -> Result<NodeId, TensorError> {
        let (b, c, h, w) = self.dims4("maxpool2d", input)?;
        let (oh, ow) = (
            kernels::pool_extent(h, ceil_mode),
            kernels::pool_extent(w, ceil_mode),
        );
        if oh == 0 || ow == 0 {
            return Err(TensorError::EmptyOutput {
                op: "maxpool2d",
                extent: 0,
            });
        }
        let (data, argmax) =
            kernels::maxpool2x2_forward(self.value(input).data(), b * c, h, w, ceil_mode);
        let out = Tensor::new(&[b, c, oh, ow], data)?;
        Ok(self.push(Op::MaxPool { input, argmax }, out))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let x = &self.node(input)?.value;
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(Op::Relu { input }, out))
    }

    /// Per-channel batch normalisation over (B, H, W). In training mode the
    /// batch statistics are used and folded into `stats`; otherwise the
    /// running statistics normalise the input.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: RunningStats<'_, T>,
        training: bool,
    ) -> Result<NodeId, TensorError> {
        let (b, c, h, w) = self.dims4("batch_norm", input)?;
        for (id, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.node(id)?.value.shape() != [c] {
                return Err(mismatch("batch_norm", format!("{what} must be [{c}]")));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(mismatch(
                "batch_norm",
                format!("running stats must hold {c} channels"),
            ));
        }
        let count = b * h * w;
        if training && count < 2 {
            return Err(TensorError::TooFewSamples(count));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let n = T::from_usize(count).unwrap();
            (0..c)
                .map(|ch| {
                    let plane = |bi: usize| &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    let mu = (0..b)
                        .map(|bi| plane(bi).iter().copied().sum::<T>())
                        .sum::<T>()
                        / n;
                    let var = (0..b)
                        .map(|bi| plane(bi).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                        .sum::<T>()
                        / n;
                    (mu, var)
                })
                .unzip()
        } else {
            (stats.mean.to_vec(), stats.var.to_vec())
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| (v + stats.epsilon).sqrt().recip())
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (scale, shift) = (g[ch] * inv_std[ch], bt[ch] - g[ch] * inv_std[ch] * mean[ch]);
                for i in off..off + hw {
                    out[i] = x[i] * scale + shift;
                }
            }
        }
        if training {
            let m = stats.momentum;
            let bessel = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            for ch in 0..c {
                stats.mean[ch] = m * stats.mean[ch] + (T::one() - m) * mean[ch];
                stats.var[ch] = m * stats.var[ch] + (T::one() - m) * var[ch] * bessel;
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            out,
        ))
    }

    /// [`Graph::batch_norm`] driven by a standalone [`BatchNormState`]; gamma
    /// and beta become fresh variables. Returns `(output, gamma, beta)`.
    pub fn batch_norm_state(
        &mut self,
        input: NodeId,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<(NodeId, NodeId, NodeId), TensorError> {
        let gamma = self.variable(state.gamma.clone());
        let beta = self.variable(state.beta.clone());
        let stats = RunningStats {
            mean: state.running_mean.data_mut(),
            var: state.running_var.data_mut(),
            momentum: state.momentum,
            epsilon: state.epsilon,
        };
        let out = self.batch_norm(input, gamma, beta, stats, training)?;
        Ok((out, gamma, beta))
    }

    /// Inverted dropout: survivors are scaled by `1/(1−rate)` during training;
    /// inference is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        let x = &self.node(input)?.value;
        if !training {
            let out = x.clone();
            return Ok(self.push(Op::Dropout { input, mask: None }, out));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(
            Op::Dropout {
                input,
                mask: Some(mask),
            },
            out,
        ))
    }

    /// `input · weightᵀ + bias` for `input: [B,N]`, `weight: [M,N]`, `bias: [M]`.
    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xs = self.node(input)?.value.shape().to_vec();
        let ws = self.node(weight)?.value.shape().to_vec();
        let bs = self.node(bias)?.value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(mismatch(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (b, n, m) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<T> = (0..b)
            .flat_map(|_| self.value(bias).data().iter().copied())
            .collect();
        T::gemm(
            b,
            n,
            m,
            T::one(),
            self.value(input).data(),
            n as isize,
            1,
            self.value(weight).data(),
            1,
            n as isize,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        let out = Tensor::new(&[b, m], out)?;
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            out,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let x = &self.node(input)?.value;
        let &[b, k] = x.shape() else {
            return Err(mismatch(
                "softmax",
                format!("expected [B,K], got {:?}", x.shape()),
            ));
        };
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let z: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let out = Tensor::new(&[b, k], out)?;
        Ok(self.push(Op::Softmax { input }, out))
    }

    /// `−(1/B) Σᵢ yᵢ · log(max(pᵢ, 1e-12))` against one-hot `labels`. When
    /// `probs` comes straight from [`Graph::softmax`], backward sends
    /// `(p − y)/B` to the logits and bypasses the softmax Jacobian.
    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        labels: &Tensor<T>,
    ) -> Result<NodeId, TensorError> {
        let p = &self.node(probs)?.value;
        if p.rank() != 2 || p.shape() != labels.shape() {
            return Err(mismatch(
                "cross_entropy",
                format!("probs {:?} vs labels {:?}", p.shape(), labels.shape()),
            ));
        }
        let (b, k) = (p.shape()[0], p.shape()[1]);
        for (row, y) in labels.data().chunks_exact(k).enumerate() {
            let ones = y.iter().filter(|&&v| v == T::one()).count();
            let zeros = y.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != k {
                return Err(TensorError::NotOneHot { row });
            }
        }
        let floor = T::from_f64_lossy(LOG_CLAMP);
        let total: T = p
            .data()
            .iter()
            .zip(labels.data())
            .filter(|(_, &y)| y != T::zero())
            .map(|(&pv, &y)| y * pv.max(floor).ln())
            .sum();
        let loss = -total / T::from_usize(b).unwrap();
        let out = Tensor::scalar(loss);
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.data().to_vec(),
            },
            out,
        ))
    }

    /// Channel concatenation: `a`'s channels first, then `b`'s.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ba, ca, ha, wa) = self.dims4("concat_channels", a)?;
        let (bb, cb, hb, wb) = self.dims4("concat_channels", b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(mismatch(
                "concat_channels",
                format!("[{ba},_,{ha},{wa}] vs [{bb},_,{hb},{wb}]"),
            ));
        }
        let hw = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for bi in 0..ba {
            out.extend_from_slice(&xa[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&xb[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let out = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.push(Op::Concat { a, b }, out))
    }

    /// Collapses all but the leading axis: channel-major, then row-major.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let x = &self.node(input)?.value;
        let b = x.shape()[0];
        let rest = x.len() / b;
        let out = x.clone().reshape(&[b, rest])?;
        Ok(self.push(Op::Reshape { input }, out))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let s = self.node(input)?.value.sum();
        Ok(self.push(Op::Sum { input }, Tensor::scalar(s)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// `scale · Σ ‖xᵢ‖²` over all `inputs`.
    pub fn sum_squares(&mut self, inputs: &[NodeId], scale: T) -> Result<NodeId, TensorError> {
        let mut total = T::zero();
        for &id in inputs {
            total = total
                + self
                    .node(id)?
                    .value
                    .data()
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>();
        }
        Ok(self.push(
            Op::SumSquares {
                inputs: inputs.to_vec(),
                scale,
            },
            Tensor::scalar(scale * total),
        ))
    }

    /// Propagates d(loss)/d(node) to every variable reachable from `loss`.
    /// Variable gradients accumulate across calls until
    /// [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let lv = &self.node(loss)?.value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        leaf_grads.push((idx, g));
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geometry,
                } => {
                    let batch = node.value.shape()[0];
                    let (dx, dk, db) = kernels::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        &g,
                        batch,
                        geometry,
                    );
                    add_into(&mut grads, *input, dx);
                    add_into(&mut grads, *kernel, dk);
                    add_into(&mut grads, *bias, db);
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src] = dx[src] + gv;
                    }
                    add_into(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    add_into(&mut grads, *input, dx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    training,
                } => {
                    let x = self.value(*input);
                    let (b, c, h, w) = x.dims4().expect("4-D");
                    let hw = h * w;
                    let gm = self.value(*gamma).data();
                    let xd = x.data();
                    let n = T::from_usize(b * hw).unwrap();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for i in off..off + hw {
                                let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                                dgamma[ch] = dgamma[ch] + g[i] * xhat;
                                dbeta[ch] = dbeta[ch] + g[i];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); xd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *training {
                                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                                    k * (g[i] - dbeta[ch] / n - xhat * dgamma[ch] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    add_into(&mut grads, *input, dx);
                    add_into(&mut grads, *gamma, dgamma);
                    add_into(&mut grads, *beta, dbeta);
                }
                Op::Dropout { input, mask } => {
                    let dx = match mask {
                        Some(m) => g.iter().zip(m).map(|(&gv, &mv)| gv * mv).collect(),
                        None => g,
                    };
                    add_into(&mut grads, *input, dx);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, wt) = (self.value(*input), self.value(*weight));
                    let (b, n, m) = (x.shape()[0], x.shape()[1], wt.shape()[0]);
                    let mut dx = vec![T::zero(); b * n];
                    T::gemm(
                        b,
                        m,
                        n,
                        T::one(),
                        &g,
                        m as isize,
                        1,
                        wt.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        n as isize,
                        1,
                    );
                    let mut dw = vec![T::zero(); m * n];
                    T::gemm(
                        m,
                        b,
                        n,
                        T::one(),
                        &g,
                        1,
                        m as isize,
                        x.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        n as isize,
                        1,
                    );
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    add_into(&mut grads, *input, dx);
                    add_into(&mut grads, *weight, dw);
                    add_into(&mut grads, *bias, db);
                }
                Op::Softmax { input } => {
                    let k = node.value.shape()[1];
                    let mut dx = vec![T::zero(); g.len()];
                    for ((p, gr), d) in node
                        .value
                        .data()
                        .chunks_exact(k)
                        .zip(g.chunks_exact(k))
                        .zip(dx.chunks_exact_mut(k))
                    {
                        let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            d[j] = p[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads, *input, dx);
                }
                Op::CrossEntropy { probs, labels } => {
                    let p = self.value(*probs);
                    let b = T::from_usize(p.shape()[0]).unwrap();
                    let scale = g[0] / b;
                    if let Op::Softmax { input: logits } = self.nodes[probs.0].op {
                        let dz = p
                            .data()
                            .iter()
                            .zip(labels)
                            .map(|(&pv, &y)| (pv - y) * scale)
                            .collect();
                        add_into(&mut grads, logits, dz);
                    } else {
                        let floor = T::from_f64_lossy(LOG_CLAMP);
                        let dp = p
                            .data()
                            .iter()
                            .zip(labels)
                            .map(|(&pv, &y)| {
                                if y == T::zero() || pv < floor {
                                    T::zero()
                                } else {
                                    -y / pv * scale
                                }
                            })
                            .collect();
                        add_into(&mut grads, *probs, dp);
                    }
                }
                Op::Concat { a, b } => {
                    let (bsz, ca, h, w) = self.value(*a).dims4().expect("4-D");
                    let cb = self.value(*b).shape()[1];
                    let hw = h * w;
                    let mut da = Vec::with_capacity(bsz * ca * hw);
                    let mut db = Vec::with_capacity(bsz * cb * hw);
                    for chunk in g.chunks_exact((ca + cb) * hw) {
                        da.extend_from_slice(&chunk[..ca * hw]);
                        db.extend_from_slice(&chunk[ca * hw..]);
                    }
                    add_into(&mut grads, *a, da);
                    add_into(&mut grads, *b, db);
                }
                Op::Reshape { input } => add_into(&mut grads, *input, g),
                Op::Sum { input } => {
                    let n = self.value(*input).len();
                    add_into(&mut grads, *input, vec![g[0]; n]);
                }
                Op::Add { a, b } => {
                    add_into(&mut grads, *a, g.clone());
                    add_into(&mut grads, *b, g);
                }
                Op::SumSquares { inputs, scale } => {
                    let two = T::from_f64_lossy(2.0);
                    for &id in inputs {
                        let d = self
                            .value(id)
                            .data()
                            .iter()
                            .map(|&v| two * *scale * v * g[0])
                            .collect();
                        add_into(&mut grads, id, d);
                    }
                }
            }
        }
        for (idx, g) in leaf_grads {
            self.nodes[idx].value.accumulate_grad(&g);
        }
        // Variables with no path to the loss still get an explicit zero.
        for node in self.nodes.iter_mut().take(loss.0 + 1) {
            if matches!(
                node.op,
                Op::Leaf {
                    requires_grad: true
                }
            ) && node.value.grad().is_none()
            {
                let z = vec![T::zero(); node.value.len()];
                node.value.set_grad(Some(z));
            }
        }
        Ok(())
    }
}
