//! The pseudo-siamese network: two convolutional streams with identical
//! topology but separate weights (one for SAR, one for optical patches), a
//! convolutional fusion stage over their concatenated feature maps, and a
//! two-layer fully connected head ending in a 2-way softmax.

use indexmap::IndexMap;
use rand::{Rng, RngCore};
use thiserror::Error;

use crate::autodiff::{BatchNormState, Graph, NodeId, RunningStats};
use crate::kernels::{pool_extent, ConvGeometry};
use crate::optim::glorot_truncated_uniform;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Patch sizes the five reference networks are trained at.
pub const PAPER_PATCH_SIZES: [usize; 5] = [64, 76, 88, 100, 112];

/// Index of the "similar" class in the one-hot label / softmax output.
pub const SIMILAR: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer {layer} collapses the spatial extent to {extent}")]
    SpatialCollapse { layer: String, extent: usize },
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("input must be [B,1,{expected},{expected}], got {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("sar and optical batches differ: {sar:?} vs {opt:?}")]
    BatchMismatch { sar: Vec<usize>, opt: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer configuration of one network instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub patch_size: usize,
    /// Output channels of each stream convolution, input side first.
    pub stream_channels: Vec<usize>,
    /// 0-based indices of stream convolutions followed by a 2×2 max-pool.
    pub stream_pool_after: Vec<usize>,
    /// Output channels of the two fusion convolutions (stride 2, then 1).
    pub fusion_channels: Vec<usize>,
    pub fc1_width: usize,
    pub num_classes: usize,
}

/// Structural counts of an instantiated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCounts {
    pub stream_convs: usize,
    pub fusion_convs: usize,
    pub fc_layers: usize,
    pub max_pools: usize,
    pub fc1_width: usize,
    pub fc2_width: usize,
}

impl ArchitectureSpec {
    /// Default layout: per stream [32,32,P][64,64,P][128,128,P][128,128],
    /// fusion conv-256/s2 and conv-256/s1 + pool, fc-512, fc-2.
    pub fn paper(patch_size: usize) -> Self {
        Self {
            patch_size,
            stream_channels: vec![32, 32, 64, 64, 128, 128, 128, 128],
            stream_pool_after: vec![1, 3, 5],
            fusion_channels: vec![256, 256],
            fc1_width: 512,
            num_classes: 2,
        }
    }

    pub fn counts(&self) -> LayerCounts {
        LayerCounts {
            stream_convs: self.stream_channels.len(),
            fusion_convs: self.fusion_channels.len(),
            fc_layers: 2,
            // both streams plus the pool after the second fusion conv
            max_pools: 2 * self.stream_pool_after.len() + 1,
            fc1_width: self.fc1_width,
            fc2_width: self.num_classes,
        }
    }

    /// Spatial extent after each stream conv (post-pool where one follows),
    /// then after fusion conv 1, fusion conv 2 and the final pool.
    fn extent_chain(&self) -> Result<Vec<(String, usize)>, ModelError> {
        let mut chain = Vec::new();
        let mut e = self.patch_size;
        for i in 0..self.stream_channels.len() {
            if self.stream_pool_after.contains(&i) {
                e = pool_extent(e, true);
                chain.push((format!("stream pool after conv{}", i + 1), e));
            }
        }
        let s2 = ConvGeometry::output_extent(e, 3, 2, 1).max(0) as usize;
        chain.push(("fusion_conv1".to_string(), s2));
        chain.push(("fusion_conv2".to_string(), s2));
        chain.push(("fusion pool".to_string(), pool_extent(s2, true)));
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 {
            return Err(ModelError::SpatialCollapse {
                layer: "input".into(),
                extent: 0,
            });
        }
        if self.stream_channels.is_empty() || self.stream_channels.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "stream channels must be non-empty and positive".into(),
            ));
        }
        if self.fusion_channels.len() != 2 || self.fusion_channels.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "exactly two positive fusion channel counts".into(),
            ));
        }
        if self.fc1_width == 0 || self.num_classes != 2 {
            return Err(ModelError::InvalidSpec(
                "fc1 must be positive and the head 2-way".into(),
            ));
        }
        let mut seen = self.stream_pool_after.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.stream_pool_after.len()
            || seen.iter().any(|&i| i >= self.stream_channels.len())
        {
            return Err(ModelError::InvalidSpec(
                "pool indices must be distinct stream conv indices".into(),
            ));
        }
        for (layer, extent) in self.extent_chain()? {
            if extent < 1 {
                return Err(ModelError::SpatialCollapse { layer, extent });
            }
        }
        Ok(())
    }

    /// [`ArchitectureSpec::validate`] plus the reference structure: a
    /// supported patch size, 8 convs per stream, 2 fusion convs and 7
    /// max-pools in total.
    pub fn validate_reference(&self) -> Result<(), ModelError> {
        if !PAPER_PATCH_SIZES.contains(&self.patch_size) {
            return Err(ModelError::InvalidSpec(format!(
                "patch size {} not in {:?}",
                self.patch_size, PAPER_PATCH_SIZES
            )));
        }
        let c = self.counts();
        if c.stream_convs != 8 || c.fusion_convs != 2 || c.max_pools != 7 {
            return Err(ModelError::InvalidSpec(format!("layer counts {c:?}")));
        }
        self.validate()
    }

    /// Width of the flattened fusion output feeding fc1.
    pub fn flat_features(&self) -> usize {
        let e = self
            .extent_chain()
            .expect("chain")
            .last()
            .expect("non-empty")
            .1;
        self.fusion_channels[1] * e * e
    }

    /// Spatial extent of each stream's output feature map.
    pub fn stream_output_extent(&self) -> usize {
        (0..self.stream_channels.len())
            .filter(|i| self.stream_pool_after.contains(i))
            .fold(self.patch_size, |e, _| pool_extent(e, true))
    }

    /// Parameter shapes in registry order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
            out.push((format!("{name}.kernel"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.bias"), vec![cout]));
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("{name}.bn.{s}"), vec![cout]));
            }
        };
        for stream in ["sar", "opt"] {
            let mut cin = 1;
            for (i, &c) in self.stream_channels.iter().enumerate() {
                conv(&mut out, &format!("{stream}_conv{}", i + 1), cin, c);
                cin = c;
            }
        }
        let mut cin = 2 * self.stream_channels.last().copied().unwrap_or(0);
        for (i, &c) in self.fusion_channels.iter().enumerate() {
            conv(&mut out, &format!("fusion_conv{}", i + 1), cin, c);
            cin = c;
        }
        out.push((
            "fc1.weight".into(),
            vec![self.fc1_width, self.flat_features()],
        ));
        out.push(("fc1.bias".into(), vec![self.fc1_width]));
        out.push(("fc2.weight".into(), vec![self.num_classes, self.fc1_width]));
        out.push(("fc2.bias".into(), vec![self.num_classes]));
        out
    }
}

/// True for tensors the optimiser updates; batch-norm running statistics are
/// state, not parameters.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// True for the kernels that carry the L2 penalty: stream convolutions only.
pub fn is_stream_kernel(name: &str) -> bool {
    (name.starts_with("sar_conv") || name.starts_with("opt_conv")) && name.ends_with(".kernel")
}

/// Ordered name → tensor registry of every learnable tensor and every
/// batch-norm running statistic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| is_learnable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of every named graph parameter into the registry.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<(), ModelError> {
        for (name, id) in graph.named_params() {
            let t = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if let Some(g) = graph.grad(*id) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that the name set and every shape match `spec` exactly.
    pub fn check_against(&self, spec: &ArchitectureSpec) -> Result<(), ModelError> {
        let expected = spec.param_shapes();
        if expected.len() != self.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::InvalidSpec(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Forward-pass mode.
pub enum Mode<'a> {
    /// Batch statistics, running-stat updates and dropout. `step` counts
    /// training passes so far including this one (1-based); it sets the
    /// warm-up of the running-statistic averages.
    Train {
        dropout_rate: f64,
        rng: &'a mut dyn RngCore,
        step: u64,
    },
    /// Running statistics, no dropout: a pure function of params and inputs.
    Eval,
}

impl Mode<'_> {
    /// Running-statistic momentum for this pass, `None` at inference.
    fn bn_momentum(&self) -> Option<f64> {
        match self {
            Mode::Train { step, .. } => Some(debiased_momentum(
                BatchNormState::<f64>::DEFAULT_MOMENTUM,
                *step,
            )),
            Mode::Eval => None,
        }
    }
}

/// Per-step momentum that turns the zero-started exponential average into
/// its bias-corrected form: after `step` updates the running statistic is
/// `Σ m^(step-s) (1-m) x_s / (1 - m^step)`, the same correction Adam applies
/// to its moments. Step 1 copies the batch statistic; large steps give `m`.
pub fn debiased_momentum(momentum: f64, step: u64) -> f64 {
    let t = step.max(1) as i32;
    momentum * (1.0 - momentum.powi(t - 1)) / (1.0 - momentum.powi(t))
}

/// Output of [`Model::forward`]: the recorded graph and its softmax node.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub probs: NodeId,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn probs(&self) -> &Tensor<T> {
        self.graph.value(self.probs)
    }
}

/// Which stream a patch goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sar,
    Optical,
}

impl Stream {
    fn prefix(self) -> &'static str {
        match self {
            Stream::Sar => "sar",
            Stream::Optical => "opt",
        }
    }
}

type StatUpdate<T> = (String, Vec<T>, Vec<T>);

/// A network instance: its layer spec and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ArchitectureSpec,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Glorot truncated-uniform kernels and FC weights, zero biases,
    /// batch-norm gamma 1 / beta 0 with running statistics (0, 1).
    pub fn build<R: Rng + ?Sized>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut params = ModelParams::new();
        for (name, shape) in spec.param_shapes() {
            let t = if name.ends_with(".kernel") {
                let rf = shape[2] * shape[3];
                glorot_truncated_uniform(&shape, shape[1] * rf, shape[0] * rf, rng)
            } else if name.ends_with(".weight") {
                glorot_truncated_uniform(&shape, shape[1], shape[0], rng)
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: ArchitectureSpec, params: ModelParams<T>) -> Result<Self, ModelError> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let d = self.spec.patch_size;
        match x.dims4() {
            Some((_, 1, h, w)) if h == d && w == d => Ok(()),
            _ => Err(ModelError::InputShape {
                expected: d,
                got: x.shape().to_vec(),
            }),
        }
    }

    fn conv_block(
        params: &ModelParams<T>,
        g: &mut Graph<T>,
        name: &str,
        x: NodeId,
        stride: usize,
        momentum: Option<f64>,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<NodeId, ModelError> {
        let kernel = g.param(
            format!("{name}.kernel"),
            params.require(&format!("{name}.kernel"))?.clone(),
        );
        let bias = g.param(
            format!("{name}.bias"),
            params.require(&format!("{name}.bias"))?.clone(),
        );
        let y = g.conv2d(x, kernel, bias, stride, 1)?;
        let y = g.relu(y)?;
        let gamma = g.param(
            format!("{name}.bn.gamma"),
            params.require(&format!("{name}.bn.gamma"))?.clone(),
        );
        let beta = g.param(
            format!("{name}.bn.beta"),
            params.require(&format!("{name}.bn.beta"))?.clone(),
        );
        let mut mean = params
            .require(&format!("{name}.bn.running_mean"))?
            .data()
            .to_vec();
        let mut var = params
            .require(&format!("{name}.bn.running_var"))?
            .data()
            .to_vec();
        let stats = RunningStats {
            mean: &mut mean,
            var: &mut var,
            momentum: T::from_f64_lossy(momentum.unwrap_or(BatchNormState::<T>::DEFAULT_MOMENTUM)),
            epsilon: T::from_f64_lossy(BatchNormState::<T>::DEFAULT_EPSILON),
        };
        let y = g.batch_norm(y, gamma, beta, stats, momentum.is_some())?;
        if momentum.is_some() {
            updates.push((name.to_string(), mean, var));
        }
        Ok(y)
    }

    fn stream_graph(
        &self,
        g: &mut Graph<T>,
        stream: Stream,
        x: NodeId,
        momentum: Option<f64>,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<NodeId, ModelError> {
        let mut y = x;
        for i in 0..self.spec.stream_channels.len() {
            let name = format!("{}_conv{}", stream.prefix(), i + 1);
            y = Self::conv_block(&self.params, g, &name, y, 1, momentum, updates)?;
            if self.spec.stream_pool_after.contains(&i) {
                y = g.maxpool2d(y, true)?;
            }
        }
        Ok(y)
    }

    fn head_graph(
        &self,
        g: &mut Graph<T>,
        sar_feat: NodeId,
        opt_feat: NodeId,
        mode: &mut Mode<'_>,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<NodeId, ModelError> {
        let momentum = mode.bn_momentum();
        let p = &self.params;
        let y = g.concat_channels(sar_feat, opt_feat)?;
        // no pooling after the strided first fusion conv
        let y = Self::conv_block(p, g, "fusion_conv1", y, 2, momentum, updates)?;
        let y = Self::conv_block(p, g, "fusion_conv2", y, 1, momentum, updates)?;
        let y = g.maxpool2d(y, true)?;
        let y = g.flatten(y)?;
        let w1 = g.param("fc1.weight", p.require("fc1.weight")?.clone());
        let b1 = g.param("fc1.bias", p.require("fc1.bias")?.clone());
        let y = g.dense(y, w1, b1)?;
        let y = g.relu(y)?;
        let y = match mode {
            Mode::Train {
                dropout_rate, rng, ..
            } => g.dropout(y, *dropout_rate, true, rng)?,
            Mode::Eval => y,
        };
        let w2 = g.param("fc2.weight", p.require("fc2.weight")?.clone());
        let b2 = g.param("fc2.bias", p.require("fc2.bias")?.clone());
        let y = g.dense(y, w2, b2)?;
        Ok(g.softmax(y)?)
    }

    fn apply_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for (name, mean, var) in updates {
            for (suffix, vals) in [("running_mean", mean), ("running_var", var)] {
                let t = self
                    .params
                    .get_mut(&format!("{name}.bn.{suffix}"))
                    .expect("present: read during forward");
                t.data_mut().copy_from_slice(&vals);
            }
        }
    }

    /// Runs both streams, the fusion stage and the head. In
    /// [`Mode::Train`] the batch-norm running statistics are updated.
    pub fn forward(
        &mut self,
        sar: &Tensor<T>,
        opt: &Tensor<T>,
        mut mode: Mode<'_>,
    ) -> Result<ForwardPass<T>, ModelError> {
        self.check_input(sar)?;
        self.check_input(opt)?;
        if sar.shape() != opt.shape() {
            return Err(ModelError::BatchMismatch {
                sar: sar.shape().to_vec(),
                opt: opt.shape().to_vec(),
            });
        }
        let momentum = mode.bn_momentum();
        let mut updates = Vec::new();
        let mut g = Graph::new();
        let xs = g.input(sar.clone());
        let xo = g.input(opt.clone());
        let fs = self.stream_graph(&mut g, Stream::Sar, xs, momentum, &mut updates)?;
        let fo = self.stream_graph(&mut g, Stream::Optical, xo, momentum, &mut updates)?;
        let probs = self.head_graph(&mut g, fs, fo, &mut mode, &mut updates)?;
        self.apply_updates(updates);
        Ok(ForwardPass { graph: g, probs })
    }

    /// Inference-mode forward returning only the class probabilities.
    pub fn predict(&self, sar: &Tensor<T>, opt: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let sf = self.stream_features(Stream::Sar, sar)?;
        let of = self.stream_features(Stream::Optical, opt)?;
        self.fuse(&sf, &of)
    }

    /// Inference-mode output of one stream for a batch of patches.
    pub fn stream_features(&self, stream: Stream, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = self.stream_graph(&mut g, stream, xi, None, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    /// Inference-mode fusion stage and head on precomputed stream features.
    /// Since every inference op acts per sample, `fuse(features(a),
    /// features(b))` equals the full forward pass on `(a, b)`.
    pub fn fuse(
        &self,
        sar_feat: &Tensor<T>,
        opt_feat: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let s = g.input(sar_feat.clone());
        let o = g.input(opt_feat.clone());
        let probs = self.head_graph(&mut g, s, o, &mut Mode::Eval, &mut Vec::new())?;
        Ok(g.value(probs).clone())
    }
}

/// The "similar" class probability of each softmax row.
pub fn similarity_score<T: Scalar>(probs: &Tensor<T>) -> Vec<T> {
    let k = probs.shape().get(1).copied().unwrap_or(1);
    probs
        .data()
        .chunks_exact(k)
        .map(|row| row[SIMILAR])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchitectureSpec {
        ArchitectureSpec {
            patch_size: 16,
            stream_channels: vec![2, 3],
            stream_pool_after: vec![0],
            fusion_channels: vec![4, 4],
            fc1_width: 5,
            num_classes: 2,
        }
    }

    #[test]
    fn extent_chain_for_reference_sizes() {
        for (d, flat) in [
            (112, 256 * 16),
            (100, 256 * 16),
            (88, 256 * 9),
            (76, 256 * 9),
            (64, 256 * 4),
        ] {
            let spec = ArchitectureSpec::paper(d);
            spec.validate_reference().unwrap();
            assert_eq!(spec.flat_features(), flat, "patch {d}");
        }
        assert_eq!(ArchitectureSpec::paper(112).stream_output_extent(), 14);
    }

    #[test]
    fn spatial_collapse_names_the_layer() {
        let mut spec = ArchitectureSpec::paper(112);
        spec.stream_pool_after = (0..8).collect();
        // 112 → 56 → … → 1 after 7 pools, the strided fusion conv still gives 1
        assert!(spec.validate().is_ok());
        spec.patch_size = 0;
        assert!(matches!(
            spec.validate(),
            Err(ModelError::SpatialCollapse { .. })
        ));
        let err = ArchitectureSpec::paper(63)
            .validate_reference()
            .unwrap_err();
        assert!(matches!(err, ModelError::InvalidSpec(_)));
    }

    #[test]
    fn build_is_deterministic_with_zero_biases() {
        let a = Model::<f32>::build(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Model::<f32>::build(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.params.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".running_mean")
            {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        a.params.check_against(&a.spec).unwrap();
    }

    #[test]
    fn wrong_patch_size_is_rejected() {
        let mut m = Model::<f32>::build(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[1, 1, 15, 15]);
        assert!(matches!(
            m.forward(&x, &x, Mode::Eval),
            Err(ModelError::InputShape { expected: 16, .. })
        ));
    }

    #[test]
    fn debiased_momentum_averages_from_the_first_batch() {
        assert_eq!(debiased_momentum(0.99, 1), 0.0);
        assert!((debiased_momentum(0.99, 100_000) - 0.99).abs() < 1e-12);
        // iterate the update against the closed-form corrected average
        let xs = [3.0, -1.0, 4.0, 1.5, 9.0];
        let mut r = 123.0;
        for (t, &x) in xs.iter().enumerate() {
            let m = debiased_momentum(0.9, t as u64 + 1);
            r = m * r + (1.0 - m) * x;
            let n = t as i32 + 1;
            let w: f64 = (0..n).map(|s| 0.9f64.powi(n - 1 - s)).sum();
            let avg: f64 = (0..n)
                .map(|s| 0.9f64.powi(n - 1 - s) * xs[s as usize])
                .sum::<f64>()
                / w;
            assert!((r - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_picks_the_similar_column() {
        let p = Tensor::new(&[2, 2], vec![0.2f32, 0.8, 0.5, 0.5]).unwrap();
        assert_eq!(similarity_score(&p), vec![0.8, 0.5]);
    }
}
