use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::softmax;
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Architecture of a dense network: `layer_widths[0]` is the input
/// dimension and the last width is the class count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
    dropout_rate: f64,
}

impl ModelSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self, NnError> {
        if layer_widths.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least 2 layer widths, got {}",
                layer_widths.len()
            )));
        }
        if layer_widths.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
            dropout_rate,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    /// Number of weight matrices.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Σ over layers of `in·out + out`.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.layer_widths
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

/// Weights of one dense layer, stored row-major as `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.outputs + j]
    }
}

/// A full parameter set; also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

pub type Gradients = Parameters;

impl Parameters {
    pub fn zeros_for(spec: &ModelSpec) -> Self {
        Self {
            layers: spec
                .layer_widths
                .windows(2)
                .map(|w| LayerParams::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Parameters) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    /// Iterates weights then bias, layer by layer.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &Parameters, factor: f64) -> Result<(), NnError> {
        if !self.same_shape(other) {
            return Err(NnError::Dimension {
                context: "parameter accumulation",
                expected: self.len(),
                found: other.len(),
            });
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += factor * b;
        }
        Ok(())
    }

    fn check_shape(&self, other: &Parameters, context: &'static str) -> Result<(), NnError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(NnError::Dimension {
                context,
                expected: self.len(),
                found: other.len(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    config: AdamConfig,
    step: u64,
    first_moment: Parameters,
    second_moment: Parameters,
}

/// Forward pass mode. Dropout masks are drawn from the supplied stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Output of [`Model::forward`] plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    logits: Vec<f64>,
    probabilities: Vec<f64>,
    /// Input seen by each layer (after activation and dropout of the layer below).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Vec<f64>>,
    /// Per-unit dropout scale of each hidden layer; `None` when no dropout was applied.
    masks: Vec<Option<Vec<f64>>>,
    generation: u64,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn class_count(&self) -> usize {
        self.logits.len()
    }

    /// Builds a trace that only carries logits, for the loss functions.
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        Self {
            logits,
            probabilities,
            layer_inputs: Vec::new(),
            hidden_pre: Vec::new(),
            masks: Vec::new(),
            generation: u64::MAX,
        }
    }
}

/// A dense network: spec, weights and Adam state.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Parameters,
    adam: AdamState,
    generation: u64,
}

impl Model {
    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::zeros_for(&spec);
        for layer in &mut params.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        Self::assemble(spec, params)
    }

    pub fn from_parameters(spec: ModelSpec, params: Parameters) -> Result<Self, NnError> {
        Parameters::zeros_for(&spec).check_shape(&params, "model parameters")?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("model parameters"));
        }
        Ok(Self::assemble(spec, params))
    }

    fn assemble(spec: ModelSpec, params: Parameters) -> Self {
        let zeros = Parameters::zeros_for(&spec);
        Self {
            adam: AdamState {
                config: AdamConfig::default(),
                step: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
            spec,
            params,
            generation: 0,
        }
    }

    pub fn with_adam(mut self, config: AdamConfig) -> Self {
        self.adam.config = config;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    /// Replaces the weights; optimizer moments are kept.
    pub fn set_parameters(&mut self, params: Parameters) -> Result<(), NnError> {
        self.params.check_shape(&params, "model parameters")?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("model parameters"));
        }
        self.params = params;
        self.generation += 1;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.adam.step
    }

    pub fn first_moment(&self) -> &Parameters {
        &self.adam.first_moment
    }

    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<ForwardTrace, NnError> {
        self.forward_slice(x.data(), mode)
    }

    pub(crate) fn forward_slice(
        &self,
        x: &[f64],
        mut mode: Mode<'_>,
    ) -> Result<ForwardTrace, NnError> {
        if x.len() != self.spec.input_dim() {
            return Err(NnError::Dimension {
                context: "forward input",
                expected: self.spec.input_dim(),
                found: x.len(),
            });
        }
        let depth = self.params.layers.len();
        let mut layer_inputs = Vec::with_capacity(depth);
        let mut hidden_pre = Vec::with_capacity(depth - 1);
        let mut masks = Vec::with_capacity(depth - 1);
        let mut current = x.to_vec();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let z = affine(layer, &current);
            layer_inputs.push(current);
            if l + 1 == depth {
                current = z;
                break;
            }
            let mut a: Vec<f64> = z.iter().map(|&v| self.spec.activation.apply(v)).collect();
            let mask = match &mut mode {
                Mode::Train(rng) if self.spec.dropout_rate > 0.0 => {
                    let keep = 1.0 - self.spec.dropout_rate;
                    let scale = 1.0 / keep;
                    let mask: Vec<f64> = (0..a.len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    a.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    Some(mask)
                }
                _ => None,
            };
            hidden_pre.push(z);
            masks.push(mask);
            current = a;
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("logits"));
        }
        let probabilities = softmax(&current);
        Ok(ForwardTrace {
            logits: current,
            probabilities,
            layer_inputs,
            hidden_pre,
            masks,
            generation: self.generation,
        })
    }

    /// Gradients of a scalar loss given its gradient at the logits.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
    ) -> Result<Gradients, NnError> {
        let mut grads = Parameters::zeros_for(&self.spec);
        self.backward_into(trace, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for `trace` into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        grads: &mut Gradients,
    ) -> Result<(), NnError> {
        if trace.generation != self.generation
            || trace.layer_inputs.len() != self.params.layers.len()
        {
            return Err(NnError::StaleTrace {
                trace: trace.generation,
                model: self.generation,
            });
        }
        if grad_logits.len() != self.spec.class_count() {
            return Err(NnError::Dimension {
                context: "logit gradient",
                expected: self.spec.class_count(),
                found: grad_logits.len(),
            });
        }
        self.params.check_shape(grads, "gradient buffer")?;

        let mut delta = grad_logits.to_vec();
        for l in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[l];
            let input = &trace.layer_inputs[l];
            let g = &mut grads.layers[l];
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut g.weights[i * layer.outputs..(i + 1) * layer.outputs];
                row.iter_mut().zip(&delta).for_each(|(w, d)| *w += a * d);
            }
            g.bias.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
            if l == 0 {
                break;
            }
            let mut below = vec![0.0; layer.inputs];
            for (i, slot) in below.iter_mut().enumerate() {
                let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                *slot = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
            }
            let pre = &trace.hidden_pre[l - 1];
            if let Some(mask) = &trace.masks[l - 1] {
                below.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
            below
                .iter_mut()
                .zip(pre)
                .for_each(|(v, &z)| *v *= self.spec.activation.derivative(z));
            delta = below;
        }
        Ok(())
    }

    /// One Adam update. Invalidates outstanding traces.
    pub fn optimizer_step(&mut self, grads: &Gradients, lr: f64) -> Result<(), NnError> {
        self.params.check_shape(grads, "optimizer step")?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradients"));
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam.config;
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let AdamState {
            first_moment,
            second_moment,
            ..
        } = &mut self.adam;
        for (((w, g), m), v) in self
            .params
            .iter_mut()
            .zip(grads.iter())
            .zip(first_moment.iter_mut())
            .zip(second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        self.generation += 1;
        if self.params.iter().any(|w| !w.is_finite()) {
            return Err(NnError::NonFinite("weights after optimizer step"));
        }
        Ok(())
    }
}

fn affine(layer: &LayerParams, input: &[f64]) -> Vec<f64> {
    let mut out = layer.bias.clone();
    for (i, &a) in input.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
        out.iter_mut().zip(row).for_each(|(o, w)| *o += a * w);
    }
    out
}
