//! The three-block convolutional classifier and the zapping primitives.
//!
//! Each block is conv → InstanceNorm → ReLU; blocks 1 and 2 end in a 2×2 max
//! pool, block 3 does not. A single fully connected layer maps the flattened
//! conv3 output to class logits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_dim, Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{self, Rng, Stream};
use crate::tensor::{Scalar, Tensor};

/// Tracked weight layers, in forward order.
pub const LAYERS: [&str; 4] = ["conv1", "conv2", "conv3", "fc"];

/// Parameter slots of [`ConvNet`], in registry order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    Conv1Weight,
    Conv1Bias,
    Conv2Weight,
    Conv2Bias,
    Conv3Weight,
    Conv3Bias,
    FcWeight,
    FcBias,
}

impl Param {
    pub const ALL: [Param; 8] = [
        Param::Conv1Weight,
        Param::Conv1Bias,
        Param::Conv2Weight,
        Param::Conv2Bias,
        Param::Conv3Weight,
        Param::Conv3Bias,
        Param::FcWeight,
        Param::FcBias,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::Conv1Weight => "conv1.weight",
            Param::Conv1Bias => "conv1.bias",
            Param::Conv2Weight => "conv2.weight",
            Param::Conv2Bias => "conv2.bias",
            Param::Conv3Weight => "conv3.weight",
            Param::Conv3Bias => "conv3.bias",
            Param::FcWeight => "fc.weight",
            Param::FcBias => "fc.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn layer(self) -> &'static str {
        LAYERS[self.index() / 2]
    }

    pub fn is_head(self) -> bool {
        matches!(self, Param::FcWeight | Param::FcBias)
    }

    /// The weight (not bias) slot of a named layer.
    pub fn weight_of(layer: &str) -> Option<Param> {
        match layer {
            "conv1" => Some(Param::Conv1Weight),
            "conv2" => Some(Param::Conv2Weight),
            "conv3" => Some(Param::Conv3Weight),
            "fc" => Some(Param::FcWeight),
            _ => None,
        }
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Linear probing: only the fully connected head.
    HeadOnly,
}

impl Trainable {
    pub fn includes(self, p: Param) -> bool {
        match self {
            Trainable::All => true,
            Trainable::HeadOnly => p.is_head(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            height: 28,
            width: 28,
            in_channels: 1,
            n_classes: 5,
            kernel: 3,
            stride: 1,
            padding: 0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn new(channels: usize, input: (usize, usize, usize), n_classes: usize) -> Self {
        ModelConfig {
            channels,
            height: input.0,
            width: input.1,
            in_channels: input.2,
            n_classes,
            ..ModelConfig::default()
        }
    }

    /// Spatial size after the conv stack, validating every stage.
    pub fn final_spatial(&self) -> Result<(usize, usize)> {
        if self.channels == 0 || self.in_channels == 0 || self.n_classes == 0 {
            return Err(Error::Invalid("model counts must be positive".into()));
        }
        let mut dims = (self.height, self.width);
        for block in 0..3 {
            let conv = |d: usize| conv_out_dim(d, self.kernel, self.stride, self.padding);
            dims = match (conv(dims.0), conv(dims.1)) {
                (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                _ => {
                    return Err(Error::Invalid(format!(
                        "input {}x{} too small: conv{} output would be empty",
                        self.height,
                        self.width,
                        block + 1
                    )))
                }
            };
            if block < 2 {
                if dims.0 < 2 || dims.1 < 2 {
                    return Err(Error::Invalid(format!(
                        "input {}x{} too small: block {} cannot pool {}x{}",
                        self.height,
                        self.width,
                        block + 1,
                        dims.0,
                        dims.1
                    )));
                }
                dims = (dims.0 / 2, dims.1 / 2);
            }
        }
        Ok(dims)
    }

    pub fn fc_in(&self) -> Result<usize> {
        let (h, w) = self.final_spatial()?;
        Ok(self.channels * h * w)
    }

    pub fn param_shape(&self, p: Param) -> Result<Vec<usize>> {
        let k = self.kernel;
        let c = self.channels;
        Ok(match p {
            Param::Conv1Weight => vec![c, self.in_channels, k, k],
            Param::Conv2Weight | Param::Conv3Weight => vec![c, c, k, k],
            Param::Conv1Bias | Param::Conv2Bias | Param::Conv3Bias => vec![c],
            Param::FcWeight => vec![self.n_classes, self.fc_in()?],
            Param::FcBias => vec![self.n_classes],
        })
    }
}

/// How weights are drawn, at construction and at every resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitSpec {
    /// Weights ~ U(−1/√fan_in, 1/√fan_in); biases zero.
    FanInUniform,
}

impl InitSpec {
    pub fn bound(self, fan_in: usize) -> f32 {
        match self {
            InitSpec::FanInUniform => 1.0 / (fan_in as f32).sqrt(),
        }
    }

    pub fn fill(self, out: &mut [f32], fan_in: usize, rng: &mut Rng) {
        let b = self.bound(fan_in);
        for v in out {
            *v = rng.random_range(-b..b);
        }
    }
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    config: ModelConfig,
    init: InitSpec,
    params: Vec<Tensor<f32>>,
}

/// Tape handles for all eight parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars(pub [Var; 8]);

impl ParamVars {
    pub fn get(&self, p: Param) -> Var {
        self.0[p.index()]
    }
}

/// Per-parameter gradients; `None` for frozen parameters.
pub type Grads = Vec<Option<Tensor<f32>>>;

/// Largest batch pushed through one tape when evaluating without gradients.
const EVAL_CHUNK: usize = 128;

pub fn register<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[Tensor<T>],
    trainable: Trainable,
) -> ParamVars {
    let vars = Param::ALL.map(|p| tape.leaf(params[p.index()].clone(), trainable.includes(p)));
    ParamVars(vars)
}

pub fn register_frozen<T: Scalar>(tape: &mut Tape<T>, params: &[Tensor<T>]) -> ParamVars {
    ParamVars(Param::ALL.map(|p| tape.leaf(params[p.index()].clone(), false)))
}

/// Conv stack up to the flattened features (N × fc_in).
pub fn features_on<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &ParamVars,
    x: Var,
) -> Result<Var> {
    let eps = T::from_f64(cfg.norm_eps);
    let blocks = [
        (Param::Conv1Weight, Param::Conv1Bias, true),
        (Param::Conv2Weight, Param::Conv2Bias, true),
        (Param::Conv3Weight, Param::Conv3Bias, false),
    ];
    let mut h = x;
    for (w, b, pool) in blocks {
        h = tape.conv2d(h, p.get(w), p.get(b), cfg.stride, cfg.padding)?;
        h = tape.instance_norm(h, eps)?;
        h = tape.relu(h);
        if pool {
            h = tape.maxpool2x2(h)?;
        }
    }
    tape.flatten(h)
}

pub fn forward_on<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &ParamVars,
    x: Var,
) -> Result<Var> {
    let f = features_on(cfg, tape, p, x)?;
    tape.linear(f, p.get(Param::FcWeight), p.get(Param::FcBias))
}

impl ConvNet {
    /// Builds a model with weights drawn from the model-init stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ConvNet> {
        let mut rng = seed::rng(seed, Stream::ModelInit, 0);
        Self::init_with(config, InitSpec::FanInUniform, &mut rng)
    }

    pub fn init_with(config: ModelConfig, init: InitSpec, rng: &mut Rng) -> Result<ConvNet> {
        config.final_spatial()?;
        let mut params = Vec::with_capacity(8);
        for p in Param::ALL {
            let shape = config.param_shape(p)?;
            let mut t = Tensor::zeros(&shape);
            if shape.len() > 1 {
                init.fill(t.data_mut(), fan_in(&shape), rng);
            }
            params.push(t);
        }
        Ok(ConvNet {
            config,
            init,
            params,
        })
    }

    /// Reassembles a model from named tensors (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<f32>>) -> Result<ConvNet> {
        if params.len() != 8 {
            return Err(Error::Invalid(format!("expected 8 parameter tensors, got {}", params.len())));
        }
        for (p, t) in Param::ALL.iter().zip(&params) {
            let want = config.param_shape(*p)?;
            if t.shape() != want.as_slice() {
                return Err(Error::shape(
                    "ConvNet::from_params",
                    format!("{} has shape {:?}, config needs {want:?}", p.name(), t.shape()),
                ));
            }
        }
        Ok(ConvNet {
            config,
            init: InitSpec::FanInUniform,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_spec(&self) -> InitSpec {
        self.init
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, p: Param) -> &Tensor<f32> {
        &self.params[p.index()]
    }

    pub fn param_mut(&mut self, p: Param) -> &mut Tensor<f32> {
        &mut self.params[p.index()]
    }

    /// Weight tensor of a named layer (conv1, conv2, conv3, fc).
    pub fn layer_weight(&self, layer: &str) -> Result<&Tensor<f32>> {
        Param::weight_of(layer)
            .map(|p| self.param(p))
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    fn check_input(&self, images: &Tensor<f32>) -> Result<usize> {
        let s = images.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.height || s[3] != c.width {
            return Err(Error::shape(
                "ConvNet",
                format!(
                    "images {s:?} do not match model input {}x{}x{}",
                    c.in_channels, c.height, c.width
                ),
            ));
        }
        Ok(s[0])
    }

    fn chunked<F>(&self, images: &Tensor<f32>, width: usize, mut f: F) -> Result<Tensor<f32>>
    where
        F: FnMut(&mut Tape<f32>, Var) -> Result<Var>,
    {
        let n = self.check_input(images)?;
        let per = images.numel() / n.max(1);
        let mut out = Vec::with_capacity(n * width);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let x = tape.constant(chunk);
            let y = f(&mut tape, x)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Tensor::new(vec![n, width], out)
    }

    /// Logits for a batch of NCHW images, without recording gradients.
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.chunked(images, self.config.n_classes, |tape, x| {
            let p = register_frozen(tape, &self.params);
            forward_on(&self.config, tape, &p, x)
        })
    }

    /// Flattened conv3 features, without recording gradients.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let width = self.config.fc_in()?;
        self.chunked(images, width, |tape, x| {
            let p = register_frozen(tape, &self.params);
            features_on(&self.config, tape, &p, x)
        })
    }

    /// Head logits from precomputed features.
    pub fn head_logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let w = tape.constant(self.param(Param::FcWeight).clone());
        let b = tape.constant(self.param(Param::FcBias).clone());
        let y = tape.linear(f, w, b)?;
        Ok(tape.value(y).clone())
    }

    /// Mean cross-entropy and gradients for the trainable parameters.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        trainable: Trainable,
    ) -> Result<(f32, Grads)> {
        self.train_step(images, labels, trainable).map(|s| (s.loss, s.grads))
    }

    /// Loss, gradients and the number of correctly classified examples.
    pub fn train_step(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        trainable: Trainable,
    ) -> Result<StepOutput> {
        self.check_input(images)?;
        let mut tape = Tape::new();
        let p = register(&mut tape, &self.params, trainable);
        let x = tape.constant(images.clone());
        let logits = forward_on(&self.config, &mut tape, &p, x)?;
        let loss = tape.cross_entropy(logits, labels)?;
        finish(&tape, logits, loss, labels, &p, trainable)
    }

    /// Linear-probe variant of [`ConvNet::loss_and_grads`] over cached features.
    pub fn head_loss_and_grads(&self, features: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Grads)> {
        self.head_train_step(features, labels).map(|s| (s.loss, s.grads))
    }

    pub fn head_train_step(&self, features: &Tensor<f32>, labels: &[usize]) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let p = register(&mut tape, &self.params, Trainable::HeadOnly);
        let f = tape.constant(features.clone());
        let logits = tape.linear(f, p.get(Param::FcWeight), p.get(Param::FcBias))?;
        let loss = tape.cross_entropy(logits, labels)?;
        finish(&tape, logits, loss, labels, &p, Trainable::HeadOnly)
    }

    /// Resamples the whole fully connected layer; conv layers are untouched.
    pub fn zap_full_fc(&mut self, rng: &mut Rng) {
        let init = self.init;
        let w = self.param_mut(Param::FcWeight);
        let fan = w.shape()[1];
        init.fill(w.data_mut(), fan, rng);
        self.param_mut(Param::FcBias)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = 0.0);
    }

    /// Resamples the weights feeding one class neuron (its fc row and bias).
    pub fn zap_class_row(&mut self, class: usize, rng: &mut Rng) -> Result<()> {
        let n = self.config.n_classes;
        if class >= n {
            return Err(Error::Invalid(format!("class {class} out of range for {n} classes")));
        }
        let init = self.init;
        let w = self.param_mut(Param::FcWeight);
        let fan = w.shape()[1];
        init.fill(&mut w.data_mut()[class * fan..(class + 1) * fan], fan, rng);
        self.param_mut(Param::FcBias).data_mut()[class] = 0.0;
        Ok(())
    }

    /// Replaces the head with a freshly drawn one of a new width.
    pub fn resize_fc(&mut self, n_classes: usize, rng: &mut Rng) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::Invalid("head needs at least one class".into()));
        }
        self.config.n_classes = n_classes;
        let fan = self.config.fc_in()?;
        self.params[Param::FcWeight.index()] = Tensor::zeros(&[n_classes, fan]);
        self.params[Param::FcBias.index()] = Tensor::zeros(&[n_classes]);
        self.zap_full_fc(rng);
        Ok(())
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f32,
    pub correct: usize,
    pub grads: Grads,
}

fn finish(
    tape: &Tape<f32>,
    logits: Var,
    loss: Var,
    labels: &[usize],
    p: &ParamVars,
    trainable: Trainable,
) -> Result<StepOutput> {
    let value = tape.value(loss).item();
    if !value.is_finite() {
        let (node, op) = tape.first_non_finite().unwrap_or((loss.index(), "cross_entropy"));
        return Err(Error::NonFinite { op, node });
    }
    let mut g = tape.backward(loss)?;
    let grads = Param::ALL
        .iter()
        .map(|&q| {
            if trainable.includes(q) {
                g.take(p.get(q))
            } else {
                None
            }
        })
        .collect();
    let correct = argmax_rows(tape.value(logits))
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(StepOutput {
        loss: value,
        correct,
        grads,
    })
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference_grad, relative_error};

    fn cfg(channels: usize, classes: usize) -> ModelConfig {
        ModelConfig::new(channels, (28, 28, 1), classes)
    }

    fn random_images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = seed::rng_from(seed);
        let data = (0..n * 28 * 28).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, 28, 28], data).unwrap()
    }

    #[test]
    fn fc_input_size_matches_shape_arithmetic() {
        // 28 -conv3-> 26 -pool-> 13 -conv3-> 11 -pool-> 5 -conv3-> 3
        let (mut h, mut w) = (28usize, 28usize);
        for block in 0..3 {
            h -= 2;
            w -= 2;
            if block < 2 {
                h /= 2;
                w /= 2;
            }
        }
        assert_eq!((h, w), (3, 3));
        let m = ConvNet::init(cfg(64, 5), 1).unwrap();
        assert_eq!(m.param(Param::FcWeight).shape(), &[5, 64 * h * w]);
        assert_eq!(m.config().fc_in().unwrap(), 576);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = ConvNet::init(cfg(8, 3), 11).unwrap();
        let b = ConvNet::init(cfg(8, 3), 11).unwrap();
        let c = ConvNet::init(cfg(8, 3), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in [Param::Conv1Bias, Param::Conv2Bias, Param::Conv3Bias, Param::FcBias] {
            assert!(a.param(p).data().iter().all(|&v| v == 0.0));
        }
        let bound = 1.0 / (8.0f32 * 9.0).sqrt();
        assert!(a.param(Param::Conv2Weight).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn single_class_head() {
        let m = ConvNet::init(cfg(8, 1), 3).unwrap();
        assert_eq!(m.param(Param::FcWeight).shape()[0], 1);
    }

    #[test]
    fn too_small_input_rejected() {
        assert!(ConvNet::init(ModelConfig::new(8, (10, 10, 1), 2), 0).is_err());
        assert!(ConvNet::init(ModelConfig::new(8, (20, 20, 1), 2), 0).is_ok());
    }

    #[test]
    fn forward_is_finite() {
        let m = ConvNet::init(ModelConfig::new(16, (28, 28, 1), 5), 5).unwrap();
        let z = m.logits(&random_images(4, 9)).unwrap();
        assert_eq!(z.shape(), &[4, 5]);
        assert!(z.is_finite());
    }

    #[test]
    fn zap_full_fc_leaves_convs() {
        let mut m = ConvNet::init(cfg(8, 4), 2).unwrap();
        let before = m.clone();
        let mut rng = seed::rng_from(99);
        m.zap_full_fc(&mut rng);
        for p in Param::ALL.iter().filter(|p| !p.is_head()) {
            assert_eq!(m.param(*p), before.param(*p));
        }
        assert_ne!(m.param(Param::FcWeight), before.param(Param::FcWeight));

        let mut a = before.clone();
        let mut b = before.clone();
        a.zap_full_fc(&mut seed::rng_from(5));
        b.zap_full_fc(&mut seed::rng_from(5));
        assert_eq!(a, b);
    }

    #[test]
    fn zap_full_fc_is_near_orthogonal() {
        // 10 classes × 576 features = 5760 weights.
        let mut m = ConvNet::init(cfg(64, 10), 4).unwrap();
        let mut rng = seed::rng_from(17);
        let mut total = 0.0;
        for _ in 0..100 {
            let before = m.param(Param::FcWeight).clone();
            m.zap_full_fc(&mut rng);
            let after = m.param(Param::FcWeight);
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in before.data().iter().zip(after.data()) {
                dot += x as f64 * y as f64;
                na += (x as f64).powi(2);
                nb += (y as f64).powi(2);
            }
            total += (dot / (na.sqrt() * nb.sqrt())).abs();
        }
        assert!(total / 100.0 < 0.05, "mean |cosim| = {}", total / 100.0);
    }

    #[test]
    fn zap_class_row_touches_one_row() {
        let mut m = ConvNet::init(cfg(8, 5), 2).unwrap();
        m.param_mut(Param::FcBias).data_mut().iter_mut().for_each(|b| *b = 0.5);
        let before = m.clone();
        m.zap_class_row(3, &mut seed::rng_from(1)).unwrap();
        let fan = m.config().fc_in().unwrap();
        let (wa, wb) = (m.param(Param::FcWeight).data(), before.param(Param::FcWeight).data());
        for row in 0..5 {
            let same = wa[row * fan..(row + 1) * fan] == wb[row * fan..(row + 1) * fan];
            assert_eq!(same, row != 3, "row {row}");
        }
        assert_eq!(m.param(Param::FcBias).data(), &[0.5, 0.5, 0.5, 0.0, 0.5]);
        assert!(m.zap_class_row(5, &mut seed::rng_from(1)).is_err());
    }

    #[test]
    fn resize_fc_keeps_convs() {
        let mut m = ConvNet::init(cfg(8, 5), 2).unwrap();
        let before = m.clone();
        m.resize_fc(7, &mut seed::rng_from(3)).unwrap();
        for p in Param::ALL.iter().filter(|p| !p.is_head()) {
            assert_eq!(m.param(*p), before.param(*p));
        }
        assert_eq!(m.logits(&random_images(2, 1)).unwrap().shape(), &[2, 7]);
        let mut m2 = before.clone();
        m2.resize_fc(7, &mut seed::rng_from(3)).unwrap();
        assert_eq!(m, m2);
        assert!(m2.resize_fc(0, &mut seed::rng_from(3)).is_err());
    }

    #[test]
    fn clone_is_independent() {
        let m = ConvNet::init(cfg(8, 3), 2).unwrap();
        let mut c = m.clone();
        assert_eq!(m, c);
        c.zap_full_fc(&mut seed::rng_from(1));
        assert_ne!(m, c);
        let snapshot = m.clone();
        let imgs = random_images(2, 4);
        let (_, g) = c.loss_and_grads(&imgs, &[0, 1], Trainable::All).unwrap();
        for (t, gi) in c.params_mut().iter_mut().zip(g) {
            let gi = gi.unwrap();
            t.data_mut().iter_mut().zip(gi.data()).for_each(|(v, d)| *v -= 0.1 * d);
        }
        assert_eq!(m, snapshot);
    }

    #[test]
    fn head_only_grads_skip_convs() {
        let m = ConvNet::init(cfg(8, 3), 2).unwrap();
        let imgs = random_images(3, 4);
        let (l1, g) = m.loss_and_grads(&imgs, &[0, 1, 2], Trainable::HeadOnly).unwrap();
        assert!(g.iter().zip(Param::ALL).all(|(gi, p)| gi.is_some() == p.is_head()));
        let feats = m.features(&imgs).unwrap();
        let (l2, g2) = m.head_loss_and_grads(&feats, &[0, 1, 2]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g[Param::FcWeight.index()], g2[Param::FcWeight.index()]);
    }

    #[test]
    fn argmax_ties_lowest() {
        let z = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&z), vec![0, 1]);
    }

    /// f32 check of the whole model against a 64-bit finite-difference oracle.
    #[test]
    fn whole_model_gradcheck_f32() {
        let m = ConvNet::init(ModelConfig::new(4, (20, 20, 1), 3), 8).unwrap();
        let imgs = random_images_sized(2, 20, 21);
        let labels = [0, 2];
        let (_, g) = m.loss_and_grads(&imgs, &labels, Trainable::All).unwrap();
        let params64: Vec<Tensor<f64>> = m.params().iter().map(|t| t.cast()).collect();
        let x64: Tensor<f64> = imgs.cast();
        for p in [Param::Conv2Weight, Param::FcWeight, Param::FcBias] {
            let loss = |v: &Tensor<f64>| {
                let mut ps = params64.clone();
                ps[p.index()] = v.clone();
                let mut tape = Tape::<f64>::new();
                let vars = register_frozen(&mut tape, &ps);
                let x = tape.constant(x64.clone());
                let z = forward_on(m.config(), &mut tape, &vars, x).unwrap();
                let l = tape.cross_entropy(z, &labels).unwrap();
                tape.value(l).item()
            };
            let fd = finite_difference_grad(loss, &params64[p.index()], 1e-4);
            let ad = g[p.index()].as_ref().unwrap();
            let worst = ad
                .data()
                .iter()
                .zip(fd.data())
                .map(|(&a, &b)| relative_error(a as f64, b, 1e-3))
                .fold(0.0, f64::max);
            assert!(worst < 1e-2, "{}: {worst}", p.name());
        }
    }

    fn random_images_sized(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = seed::rng_from(seed);
        let data = (0..n * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, size, size], data).unwrap()
    }
}
